//! Synthetic multi-tab direction traces with known labels.
//!
//! Every class is a page with a fixed burst signature. Classes are grouped into
//! sites of `site_size` subpages whose signatures share the first
//! `shared_prefix_bursts` bursts, so subpages of one site are deliberately similar.
//! A session renders 1-5 pages with per-burst length jitter and starts each page a
//! random gap after the previous one; where pages overlap, their cells are merged
//! by drawing the next cell from an active page with probability proportional to
//! its remaining length. The tab that emitted every cell is kept as provenance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Dataset, DirectionTrace, LabelVector, Sample, UNMONITORED_CLASS};

/// Mixes a base seed with stream identifiers (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const STREAM_SITE: u64 = 11;
const STREAM_PAGE: u64 = 12;
const STREAM_SAMPLE: u64 = 13;
const STREAM_TABS: u64 = 14;
const STREAM_UNMONITORED: u64 = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub site_size: usize,
    pub shared_prefix_bursts: usize,
    /// Inclusive range for the number of page-specific bursts.
    pub body_bursts: (usize, usize),
    /// Inclusive length range of outgoing (+1) bursts.
    pub outgoing_burst: (usize, usize),
    /// Inclusive length range of incoming (-1) bursts.
    pub incoming_burst: (usize, usize),
    pub jitter: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            site_size: 10,
            shared_prefix_bursts: 8,
            body_bursts: (30, 44),
            outgoing_burst: (1, 4),
            incoming_burst: (2, 30),
            jitter: 0.15,
        }
    }
}

impl ProfileConfig {
    pub fn validate(&self) -> Result<()> {
        let ok_range = |(lo, hi): (usize, usize)| lo >= 1 && lo <= hi;
        if self.site_size == 0 {
            return Err(Error::Config("site_size must be positive".into()));
        }
        if self.body_bursts.0 == 0 || self.body_bursts.0 > self.body_bursts.1 {
            return Err(Error::Config("body_bursts must be a non-empty range >= 1".into()));
        }
        if !ok_range(self.outgoing_burst) || !ok_range(self.incoming_burst) {
            return Err(Error::Config("burst length ranges must satisfy 1 <= lo <= hi".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config("jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Burst signature of one page.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageProfile {
    pub class_id: usize,
    pub burst_lengths: Vec<usize>,
    pub burst_directions: Vec<i8>,
    pub jitter: f64,
}

impl PageProfile {
    pub fn validate(&self) -> Result<()> {
        if self.burst_lengths.is_empty() || self.burst_lengths.len() != self.burst_directions.len() {
            return Err(Error::Config("profile needs matching, non-empty burst lists".into()));
        }
        if self.burst_lengths.contains(&0) {
            return Err(Error::Config("burst lengths must be positive".into()));
        }
        if self.burst_directions.iter().any(|d| *d != 1 && *d != -1) {
            return Err(Error::Config("burst directions must be +1 or -1".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config("jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn nominal_len(&self) -> usize {
        self.burst_lengths.iter().sum()
    }
}

fn direction_at(index: usize) -> i8 {
    if index % 2 == 0 {
        1
    } else {
        -1
    }
}

fn draw_burst<R: Rng>(rng: &mut R, index: usize, cfg: &ProfileConfig) -> usize {
    let (lo, hi) = if direction_at(index) == 1 {
        cfg.outgoing_burst
    } else {
        cfg.incoming_burst
    };
    rng.gen_range(lo..=hi)
}

fn build_profile(class_id: usize, prefix_seed: u64, body_seed: u64, marker: usize, cfg: &ProfileConfig) -> PageProfile {
    let mut lengths = Vec::new();
    let mut prefix_rng = ChaCha8Rng::seed_from_u64(prefix_seed);
    for i in 0..cfg.shared_prefix_bursts {
        lengths.push(draw_burst(&mut prefix_rng, i, cfg));
    }
    let mut body_rng = ChaCha8Rng::seed_from_u64(body_seed);
    let body = body_rng.gen_range(cfg.body_bursts.0..=cfg.body_bursts.1);
    for j in 0..body {
        let index = cfg.shared_prefix_bursts + j;
        if j == 0 {
            // The first page-specific burst encodes the subpage index, so two
            // subpages of one site can never have identical signatures.
            let base = if direction_at(index) == 1 {
                cfg.outgoing_burst.0
            } else {
                cfg.incoming_burst.0
            };
            lengths.push(base + 3 * marker);
        } else {
            lengths.push(draw_burst(&mut body_rng, index, cfg));
        }
    }
    let directions = (0..lengths.len()).map(direction_at).collect();
    PageProfile {
        class_id,
        burst_lengths: lengths,
        burst_directions: directions,
        jitter: cfg.jitter,
    }
}

/// Deterministic in `(class_id, seed)`; subpages of one site share the burst prefix.
pub fn make_page_profile(class_id: usize, seed: u64, cfg: &ProfileConfig) -> PageProfile {
    let site = (class_id / cfg.site_size) as u64;
    build_profile(
        class_id,
        derive_seed(seed, STREAM_SITE, site),
        derive_seed(seed, STREAM_PAGE, class_id as u64),
        class_id % cfg.site_size,
        cfg,
    )
}

/// A page outside the monitored set, drawn fresh from `seed`. It is labelled with
/// the reserved `class_id`.
pub fn make_unmonitored_profile(class_id: usize, seed: u64, cfg: &ProfileConfig) -> PageProfile {
    let own = derive_seed(seed, STREAM_UNMONITORED, 0);
    let marker = (own % cfg.site_size as u64) as usize;
    build_profile(class_id, derive_seed(own, STREAM_SITE, 0), derive_seed(own, STREAM_PAGE, 0), marker, cfg)
}

/// Concatenates the bursts, each length perturbed by at most `jitter * nominal`.
pub fn render_single_tab<R: Rng + ?Sized>(profile: &PageProfile, rng: &mut R) -> Vec<i8> {
    let mut out = Vec::with_capacity(profile.nominal_len() * 2);
    for (&len, &dir) in profile.burst_lengths.iter().zip(&profile.burst_directions) {
        let actual = if profile.jitter > 0.0 {
            let u: f64 = rng.gen_range(-profile.jitter..=profile.jitter);
            let delta = (len as f64 * u).trunc() as i64;
            (len as i64 + delta).max(1) as usize
        } else {
            len
        };
        out.extend(std::iter::repeat(dir).take(actual));
    }
    out
}

/// How far after the previous page's start the next page begins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GapRange {
    /// Absolute offsets in cells.
    Cells { lo: usize, hi: usize },
    /// Fractions of the previous page's rendered length.
    Fraction { lo: f64, hi: f64 },
}

impl Default for GapRange {
    fn default() -> Self {
        GapRange::Fraction { lo: 0.1, hi: 0.6 }
    }
}

impl GapRange {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            GapRange::Cells { lo, hi } => lo <= hi,
            GapRange::Fraction { lo, hi } => 0.0 <= lo && lo <= hi && hi.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("gap range needs 0 <= lo <= hi".into()))
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R, previous_len: usize) -> usize {
        match *self {
            GapRange::Cells { lo, hi } => rng.gen_range(lo..=hi),
            GapRange::Fraction { lo, hi } => {
                let f = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
                (f * previous_len as f64).round() as usize
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub tab_count: usize,
    pub gap_range: GapRange,
    pub seed: u64,
}

impl SessionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.tab_count) {
            return Err(Error::Config(format!("tab_count {} outside [1, 5]", self.tab_count)));
        }
        self.gap_range.validate()
    }
}

/// Marks padding cells in provenance vectors.
pub const NO_TAB: u8 = u8::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabRecord {
    pub class_id: usize,
    /// Output position at which the page became active.
    pub offset: usize,
    pub rendered_len: usize,
    /// Cells of this page that survived truncation.
    pub emitted: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedSession {
    pub sample: Sample,
    /// Tab index for every trace position; `NO_TAB` on padding.
    pub provenance: Vec<u8>,
    pub tabs: Vec<TabRecord>,
}

struct Merge {
    cells: Vec<i8>,
    provenance: Vec<u8>,
    offsets: Vec<usize>,
}

fn merge_streams<R: Rng + ?Sized>(streams: &[Vec<i8>], gaps: &[usize], rng: &mut R) -> Merge {
    let n = streams.len();
    let total: usize = streams.iter().map(Vec::len).sum();
    let mut cells = Vec::with_capacity(total);
    let mut provenance = Vec::with_capacity(total);
    let mut offsets = vec![0usize; n];
    let mut consumed = vec![0usize; n];
    // planned start of the next page; gaps[k] separates page k-1 and page k
    let mut next = 1usize;
    let mut next_start = gaps.first().copied().unwrap_or(0);
    let mut active = 1usize;
    loop {
        while next < n && cells.len() >= next_start {
            offsets[next] = cells.len();
            next += 1;
            active = next;
            if next < n {
                next_start = offsets[next - 1] + gaps[next - 1];
            }
        }
        let remaining: usize = (0..active).map(|k| streams[k].len() - consumed[k]).sum();
        if remaining == 0 {
            if next < n {
                // nothing left to interleave with: the next page starts immediately
                next_start = cells.len();
                continue;
            }
            break;
        }
        let mut draw = rng.gen_range(0..remaining);
        let mut chosen = 0;
        for k in 0..active {
            let left = streams[k].len() - consumed[k];
            if draw < left {
                chosen = k;
                break;
            }
            draw -= left;
        }
        cells.push(streams[chosen][consumed[chosen]]);
        provenance.push(chosen as u8);
        consumed[chosen] += 1;
    }
    Merge {
        cells,
        provenance,
        offsets,
    }
}

const MAX_SESSION_ATTEMPTS: usize = 1000;

/// Renders and merges `profiles` into one sample truncated or padded to `seq_len`.
///
/// A draw whose truncation would drop every cell of some page is rejected and redrawn.
pub fn compose_session<R: Rng + ?Sized>(
    id: impl Into<String>,
    profiles: &[PageProfile],
    spec: &SessionSpec,
    seq_len: usize,
    class_count: usize,
    rng: &mut R,
) -> Result<ComposedSession> {
    spec.validate()?;
    if profiles.len() != spec.tab_count {
        return Err(Error::Config(format!(
            "{} profiles for a {}-tab session",
            profiles.len(),
            spec.tab_count
        )));
    }
    for p in profiles {
        p.validate()?;
    }
    let labels = LabelVector::encode(profiles.iter().map(|p| p.class_id), class_count)?;
    for _ in 0..MAX_SESSION_ATTEMPTS {
        let streams: Vec<Vec<i8>> = profiles.iter().map(|p| render_single_tab(p, rng)).collect();
        let gaps: Vec<usize> = streams
            .iter()
            .take(streams.len().saturating_sub(1))
            .map(|s| spec.gap_range.draw(rng, s.len()))
            .collect();
        let merged = merge_streams(&streams, &gaps, rng);
        let kept = merged.cells.len().min(seq_len);
        let mut emitted = vec![0usize; streams.len()];
        for &t in &merged.provenance[..kept] {
            emitted[t as usize] += 1;
        }
        if emitted.contains(&0) {
            continue;
        }
        let trace = DirectionTrace::pad_or_truncate(&merged.cells, seq_len)?;
        let mut provenance = vec![NO_TAB; seq_len];
        provenance[..kept].copy_from_slice(&merged.provenance[..kept]);
        let tabs = profiles
            .iter()
            .enumerate()
            .map(|(k, p)| TabRecord {
                class_id: p.class_id,
                offset: merged.offsets[k],
                rendered_len: streams[k].len(),
                emitted: emitted[k],
            })
            .collect();
        return Ok(ComposedSession {
            sample: Sample {
                id: id.into(),
                trace,
                labels: labels.clone(),
                tab_count: spec.tab_count,
            },
            provenance,
            tabs,
        });
    }
    Err(Error::Generator(format!(
        "could not fit {} pages into {seq_len} cells",
        spec.tab_count
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Number of monitored classes.
    pub class_count: usize,
    pub samples: usize,
    pub seq_len: usize,
    /// Relative weight of 1..=5 tab sessions.
    pub tab_distribution: Vec<f64>,
    pub gap_range: GapRange,
    pub profile: ProfileConfig,
    /// Adds one reserved "unmonitored" class; every session then loads one fresh
    /// unmonitored page in place of a monitored one.
    pub open_world: bool,
}

impl SynthConfig {
    /// Tab-count weights shaped like the reported test-set statistics (2913/2517/1145/437/77).
    pub fn reported_tab_shape() -> Vec<f64> {
        vec![2913.0, 2517.0, 1145.0, 437.0, 77.0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config("class_count must be at least 2".into()));
        }
        if self.samples == 0 || self.seq_len == 0 {
            return Err(Error::Config("samples and seq_len must be positive".into()));
        }
        let dist = &self.tab_distribution;
        if dist.is_empty() || dist.len() > 5 || dist.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("tab_distribution needs 1-5 non-negative weights".into()));
        }
        if dist.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("tab_distribution weights sum to zero".into()));
        }
        let max_tabs = dist.iter().rposition(|w| *w > 0.0).unwrap() + 1;
        let monitored_needed = if self.open_world { max_tabs - 1 } else { max_tabs };
        if monitored_needed > self.class_count {
            return Err(Error::Config(format!(
                "{max_tabs}-tab sessions need more than {} classes",
                self.class_count
            )));
        }
        self.gap_range.validate()?;
        self.profile.validate()
    }

    pub fn total_classes(&self) -> usize {
        self.class_count + usize::from(self.open_world)
    }
}

/// Splits `n` into integer quotas proportional to `weights` (largest remainder,
/// ties broken toward fewer tabs).
pub fn tab_quotas(weights: &[f64], n: usize) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = n - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        if weights[i] > 0.0 {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleProvenance {
    pub id: String,
    pub tabs: Vec<TabRecord>,
    /// Run-length encoded per-cell tab index over the unpadded prefix.
    pub runs: Vec<(u8, u32)>,
}

impl SampleProvenance {
    pub fn expand(&self) -> Vec<u8> {
        self.runs
            .iter()
            .flat_map(|&(t, n)| std::iter::repeat(t).take(n as usize))
            .collect()
    }
}

fn run_length(cells: &[u8]) -> Vec<(u8, u32)> {
    let mut runs: Vec<(u8, u32)> = Vec::new();
    for &c in cells.iter().take_while(|c| **c != NO_TAB) {
        match runs.last_mut() {
            Some((t, n)) if *t == c => *n += 1,
            _ => runs.push((c, 1)),
        }
    }
    runs
}

/// Sidecar record written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub seed: u64,
    pub config: SynthConfig,
    pub samples: Vec<SampleProvenance>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub meta: SynthMeta,
}

pub fn class_names(cfg: &SynthConfig) -> Vec<String> {
    let mut names: Vec<String> = (0..cfg.class_count)
        .map(|c| format!("site{}-page{}", c / cfg.profile.site_size, c % cfg.profile.site_size))
        .collect();
    if cfg.open_world {
        names.push(UNMONITORED_CLASS.to_string());
    }
    names
}

/// Generates `cfg.samples` sessions. Tab counts follow `tab_distribution` exactly
/// (largest-remainder quotas, shuffled); each sample is a pure function of
/// `(seed, sample index)`.
pub fn generate_dataset(cfg: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    cfg.validate()?;
    let profiles: Vec<PageProfile> = (0..cfg.class_count)
        .map(|c| make_page_profile(c, seed, &cfg.profile))
        .collect();
    let quotas = tab_quotas(&cfg.tab_distribution, cfg.samples);
    let mut tab_counts: Vec<usize> = quotas
        .iter()
        .enumerate()
        .flat_map(|(i, q)| std::iter::repeat(i + 1).take(*q))
        .collect();
    tab_counts.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_TABS, 0)));

    let total_classes = cfg.total_classes();
    let unmonitored_id = cfg.class_count;
    let mut samples = Vec::with_capacity(cfg.samples);
    let mut provenance = Vec::with_capacity(cfg.samples);
    for (i, &tabs) in tab_counts.iter().enumerate() {
        let sample_seed = derive_seed(seed, STREAM_SAMPLE, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let monitored = if cfg.open_world { tabs - 1 } else { tabs };
        let mut pages: Vec<PageProfile> = rand::seq::index::sample(&mut rng, cfg.class_count, monitored)
            .into_iter()
            .map(|c| profiles[c].clone())
            .collect();
        if cfg.open_world {
            let at = rng.gen_range(0..=pages.len());
            pages.insert(at, make_unmonitored_profile(unmonitored_id, sample_seed, &cfg.profile));
        }
        let spec = SessionSpec {
            tab_count: tabs,
            gap_range: cfg.gap_range,
            seed: sample_seed,
        };
        let id = format!("s{i:06}");
        let session = compose_session(id.clone(), &pages, &spec, cfg.seq_len, total_classes, &mut rng)?;
        provenance.push(SampleProvenance {
            id,
            tabs: session.tabs,
            runs: run_length(&session.provenance),
        });
        samples.push(session.sample);
    }
    let meta_json = serde_json::json!({
        "generator": "synthetic-multitab",
        "seed": seed,
        "class_count": total_classes,
        "open_world": cfg.open_world,
    });
    let dataset = Dataset::new(samples, class_names(cfg), meta_json)?;
    Ok(SynthOutput {
        dataset,
        meta: SynthMeta {
            seed,
            config: cfg.clone(),
            samples: provenance,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(bursts: &[(usize, i8)]) -> PageProfile {
        PageProfile {
            class_id: 0,
            burst_lengths: bursts.iter().map(|b| b.0).collect(),
            burst_directions: bursts.iter().map(|b| b.1).collect(),
            jitter: 0.0,
        }
    }

    fn small_cfg(samples: usize) -> SynthConfig {
        SynthConfig {
            class_count: 20,
            samples,
            seq_len: 2000,
            tab_distribution: SynthConfig::reported_tab_shape(),
            gap_range: GapRange::default(),
            profile: ProfileConfig::default(),
            open_world: false,
        }
    }

    #[test]
    fn profiles_are_deterministic_and_distinct() {
        let cfg = ProfileConfig::default();
        assert_eq!(make_page_profile(0, 42, &cfg), make_page_profile(0, 42, &cfg));
        let all: Vec<PageProfile> = (0..40).map(|c| make_page_profile(c, 42, &cfg)).collect();
        for i in 0..all.len() {
            for j in i + 1..all.len() {
                assert_ne!(all[i].burst_lengths, all[j].burst_lengths, "{i} vs {j}");
            }
        }
    }

    #[test]
    fn subpages_share_site_prefix() {
        let cfg = ProfileConfig::default();
        let k = cfg.shared_prefix_bursts;
        let site: Vec<PageProfile> = (0..10).map(|c| make_page_profile(c, 7, &cfg)).collect();
        for p in &site[1..] {
            assert_eq!(p.burst_lengths[..k], site[0].burst_lengths[..k]);
        }
        let other = make_page_profile(10, 7, &cfg);
        assert_ne!(other.burst_lengths[..k], site[0].burst_lengths[..k]);
    }

    #[test]
    fn render_without_jitter_concatenates() {
        let p = fixed(&[(3, 1), (2, -1)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(render_single_tab(&p, &mut rng), vec![1, 1, 1, -1, -1]);
    }

    #[test]
    fn render_jitter_bounded_per_burst() {
        let mut p = make_page_profile(3, 1, &ProfileConfig::default());
        p.jitter = 0.1;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let cells = render_single_tab(&p, &mut rng);
            // recover bursts as maximal runs; directions alternate, so runs map 1:1
            let mut runs = Vec::new();
            let mut i = 0;
            while i < cells.len() {
                let j = cells[i..].iter().position(|c| *c != cells[i]).map_or(cells.len(), |d| i + d);
                runs.push(j - i);
                i = j;
            }
            assert_eq!(runs.len(), p.burst_lengths.len());
            for (got, nominal) in runs.iter().zip(&p.burst_lengths) {
                let dev = (*got as f64 - *nominal as f64).abs();
                assert!(dev <= 0.1 * *nominal as f64 + 1e-9, "{got} vs {nominal}");
            }
        }
    }

    #[test]
    fn single_tab_session_equals_padded_render() {
        let p = make_page_profile(4, 9, &ProfileConfig::default());
        let spec = SessionSpec {
            tab_count: 1,
            gap_range: GapRange::default(),
            seed: 0,
        };
        let s = compose_session("a", &[p.clone()], &spec, 2000, 20, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let render = render_single_tab(&p, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(s.sample.trace, DirectionTrace::pad_or_truncate(&render, 2000).unwrap());
        assert!(s.provenance[..render.len()].iter().all(|t| *t == 0));
    }

    #[test]
    fn disjoint_tabs_concatenate() {
        let a = PageProfile { class_id: 1, ..fixed(&[(3, 1), (2, -1)]) };
        let b = PageProfile { class_id: 2, ..fixed(&[(1, -1), (4, 1)]) };
        let spec = SessionSpec {
            tab_count: 2,
            gap_range: GapRange::Cells { lo: 8, hi: 8 },
            seed: 0,
        };
        let s = compose_session("x", &[a, b], &spec, 12, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.sample.trace.values(), &[1, 1, 1, -1, -1, -1, 1, 1, 1, 1, 0, 0]);
        assert_eq!(&s.provenance[..10], &[0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(s.sample.labels.decode(), vec![1, 2]);
    }

    #[test]
    fn zero_gap_interleaves_both_tabs() {
        let a = PageProfile { class_id: 0, ..fixed(&[(40, 1)]) };
        let b = PageProfile { class_id: 3, ..fixed(&[(40, -1)]) };
        let spec = SessionSpec {
            tab_count: 2,
            gap_range: GapRange::Cells { lo: 0, hi: 0 },
            seed: 0,
        };
        let s = compose_session("x", &[a, b], &spec, 100, 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.sample.labels.popcount(), 2);
        // provenance agrees with the emitted values, and the first half mixes both
        for (v, t) in s.sample.trace.values()[..80].iter().zip(&s.provenance) {
            assert_eq!(*v, if *t == 0 { 1 } else { -1 });
        }
        let first: Vec<u8> = s.provenance[..20].to_vec();
        assert!(first.contains(&0) && first.contains(&1));
    }

    #[test]
    fn truncation_rejects_sessions_losing_a_tab() {
        let a = PageProfile { class_id: 0, ..fixed(&[(50, 1)]) };
        let b = PageProfile { class_id: 1, ..fixed(&[(5, -1)]) };
        let spec = SessionSpec {
            tab_count: 2,
            gap_range: GapRange::Cells { lo: 60, hi: 60 },
            seed: 0,
        };
        assert!(compose_session("x", &[a, b], &spec, 30, 2, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn dataset_contract_and_determinism() {
        let cfg = small_cfg(300);
        let a = generate_dataset(&cfg, 1).unwrap();
        let b = generate_dataset(&cfg, 1).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.meta, b.meta);
        assert_eq!(a.dataset.len(), 300);
        assert_eq!(a.dataset.class_count(), 20);
        for (s, p) in a.dataset.samples().iter().zip(&a.meta.samples) {
            assert_eq!(s.tab_count, s.labels.popcount());
            let classes: Vec<usize> = p.tabs.iter().map(|t| t.class_id).collect();
            for c in &classes {
                assert!(s.labels.contains(*c));
            }
            let cells = p.expand();
            assert_eq!(cells.len(), s.trace.true_length());
            for t in 0..p.tabs.len() {
                assert!(cells.contains(&(t as u8)), "tab {t} missing in {}", s.id);
            }
            if s.tab_count == 1 {
                assert!(cells.iter().all(|c| *c == 0));
            }
        }
    }

    #[test]
    fn tab_distribution_matches_quotas() {
        let cfg = small_cfg(10_000);
        let weights = [0.4, 0.35, 0.16, 0.06, 0.01];
        let q = tab_quotas(&weights, 10_000);
        assert_eq!(q.iter().sum::<usize>(), 10_000);
        let total: f64 = weights.iter().sum();
        for (qi, w) in q.iter().zip(weights) {
            assert!((*qi as f64 - w / total * 10_000.0).abs() <= 1.0);
        }
        let counts = tab_quotas(&cfg.tab_distribution, 7089);
        assert_eq!(counts, vec![2913, 2517, 1145, 437, 77]);
    }

    #[test]
    fn open_world_adds_reserved_class() {
        let mut cfg = small_cfg(50);
        cfg.open_world = true;
        let out = generate_dataset(&cfg, 3).unwrap();
        assert_eq!(out.dataset.class_count(), 21);
        assert_eq!(out.dataset.class_names()[20], UNMONITORED_CLASS);
        assert!(out.dataset.samples().iter().all(|s| s.labels.contains(20)));
    }
}
