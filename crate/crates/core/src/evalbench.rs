//! Prompt-budget sweeps, grouped Dice reports and the interaction-time
//! cost model for slice-wise versus volumetric prompting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curate::{DatasetManifest, SkippedCase};
use crate::error::{Error, Result};
use crate::nifti;
use crate::promptsim::{run_session, ClickStrategy};
use crate::train::{normalize_intensity, Normalization};
use crate::voxgrid::{BinaryMask, PointPrompt, Volume};

pub const DEFAULT_BUDGETS: [usize; 4] = [1, 3, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// 2D model prompted slice by slice.
    Sam2d,
    /// Medical 2D model prompted slice by slice.
    Sammed2d,
    /// Volumetric model prompted once per volume.
    Sammed3d,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sam2d" => Ok(Method::Sam2d),
            "sammed2d" => Ok(Method::Sammed2d),
            "sammed3d" => Ok(Method::Sammed3d),
            _ => Err(Error::Config(format!("unknown method {s}"))),
        }
    }
}

/// Interaction-time model. Slice-wise methods pay `k·N·(τ + c_k)` for `N`
/// slices containing the target; the volumetric method pays `k·τ + b_k`.
/// Constants are kept in hundredths of a second so the formulas evaluate
/// exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionCostModel {
    pub method: Method,
}

impl InteractionCostModel {
    pub fn new(method: Method) -> Self {
        InteractionCostModel { method }
    }

    pub fn budgets(&self) -> &'static [usize] {
        match self.method {
            Method::Sam2d | Method::Sammed2d => &[1, 3, 5],
            Method::Sammed3d => &[1, 3, 5, 10],
        }
    }

    /// Per-prompt (slice-wise) or fixed (volumetric) overhead in
    /// hundredths of a second.
    pub fn overhead_centis(&self, k: usize) -> Result<u64> {
        let c = match (self.method, k) {
            (Method::Sam2d, 1) => 13,
            (Method::Sam2d, 3) => 19,
            (Method::Sam2d, 5) => 25,
            (Method::Sammed2d, 1) => 4,
            (Method::Sammed2d, 3) => 7,
            (Method::Sammed2d, 5) => 10,
            (Method::Sammed3d, 1) => 200,
            (Method::Sammed3d, 3) => 300,
            (Method::Sammed3d, 5) => 400,
            (Method::Sammed3d, 10) => 600,
            _ => {
                return Err(Error::UnsupportedBudget {
                    method: format!("{:?}", self.method).to_lowercase(),
                    k,
                })
            }
        };
        Ok(c)
    }

    /// Seconds for `k` prompts, `n` target slices and `tau` seconds per
    /// prompt. `n` is ignored by the volumetric method.
    pub fn time(&self, n: usize, tau: f64, k: usize) -> Result<f64> {
        if n == 0 || !(tau >= 0.0) || k == 0 {
            return Err(Error::Config("interaction time needs N ≥ 1, τ ≥ 0 and k ≥ 1".into()));
        }
        let c = self.overhead_centis(k)? as f64;
        let k = k as f64;
        Ok(match self.method {
            Method::Sam2d | Method::Sammed2d => k * n as f64 * (tau * 100.0 + c) / 100.0,
            Method::Sammed3d => (k * tau * 100.0 + c) / 100.0,
        })
    }
}

pub fn interaction_time(model: &InteractionCostModel, n: usize, tau: f64, k: usize) -> Result<f64> {
    model.time(n, tau, k)
}

/// Smallest slice count at which `slice_method` takes strictly longer
/// than the volumetric method at the same budget.
pub fn crossover_slices(slice_method: Method, tau: f64, k: usize) -> Result<usize> {
    let vol = InteractionCostModel::new(Method::Sammed3d).time(1, tau, k)?;
    let m = InteractionCostModel::new(slice_method);
    let mut n = 1;
    while m.time(n, tau, k)? <= vol {
        n += 1;
    }
    Ok(n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeenFlag {
    Seen,
    Unseen,
}

/// Dice of one (case, class) session at each budget. Wall times are kept
/// out of the serialized record so record files are reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub case_id: String,
    pub class_name: String,
    pub anatomy_tag: String,
    pub modality_tag: String,
    pub seen: SeenFlag,
    pub dice_at_budget: BTreeMap<usize, f64>,
    #[serde(skip)]
    pub wall_time: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub case_id: String,
    pub class_name: String,
    pub wall_time: BTreeMap<usize, f64>,
}

/// One (case, class) evaluation target, intensities normalized.
#[derive(Debug, Clone)]
pub struct EvalTarget {
    pub case_id: String,
    pub class_name: String,
    pub anatomy_tag: String,
    pub modality_tag: String,
    pub seen: SeenFlag,
    pub volume: Volume,
    pub gt: BinaryMask,
}

fn check_budgets(budgets: &[usize]) -> Result<Vec<usize>> {
    if budgets.is_empty() || budgets.contains(&0) {
        return Err(Error::Config(
            "budgets must be a nonempty list of positive counts".into(),
        ));
    }
    let mut b = budgets.to_vec();
    b.sort_unstable();
    b.dedup();
    Ok(b)
}

/// Seed of one session, independent of evaluation order.
fn session_seed(seed: u64, case_id: &str, class_name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in case_id.bytes().chain([0]).chain(class_name.bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Runs one click session per target up to the largest budget. Dice at
/// budget `b` is the Dice after the `b`-th prediction; a session that stops
/// early carries its last Dice forward.
pub fn evaluate_targets<F>(segment: F, targets: &[EvalTarget], budgets: &[usize], seed: u64) -> Result<Vec<EvalRecord>>
where
    F: Fn(&Volume, &[PointPrompt]) -> Result<BinaryMask>,
{
    let budgets = check_budgets(budgets)?;
    let max = *budgets.last().expect("nonempty");
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        let mut rng = ChaCha8Rng::seed_from_u64(session_seed(seed, &t.case_id, &t.class_name));
        let mut times = Vec::with_capacity(max);
        let start = Instant::now();
        let outcome = run_session(
            |v, c| {
                let r = segment(v, c);
                times.push(start.elapsed().as_secs_f64());
                r
            },
            &t.volume,
            &t.gt,
            max,
            ClickStrategy::Uniform,
            &mut rng,
        )?;
        let last = outcome.steps.len();
        let mut dice_at_budget = BTreeMap::new();
        let mut wall_time = BTreeMap::new();
        for &b in &budgets {
            let i = b.min(last) - 1;
            dice_at_budget.insert(b, outcome.steps[i].dice);
            wall_time.insert(b, times[i]);
        }
        out.push(EvalRecord {
            case_id: t.case_id.clone(),
            class_name: t.class_name.clone(),
            anatomy_tag: t.anatomy_tag.clone(),
            modality_tag: t.modality_tag.clone(),
            seen: t.seen,
            dice_at_budget,
            wall_time,
        });
    }
    Ok(out)
}

/// Loads every (case, class) target of `manifest`; cases that fail to load
/// are returned as skipped.
pub fn load_eval_targets(manifest: &DatasetManifest, norm: &Normalization) -> (Vec<EvalTarget>, Vec<SkippedCase>) {
    let mut targets = Vec::new();
    let mut skipped = Vec::new();
    for e in &manifest.entries {
        let loaded = nifti::read_volume(&e.image_path).and_then(|v| {
            let l = nifti::read_labels(&e.label_path, &e.class_map)?;
            if l.dims != v.dims {
                return Err(Error::Shape("image and label dims differ".into()));
            }
            Ok((v, l))
        });
        let (v, labels) = match loaded {
            Ok(x) => x,
            Err(err) => {
                log::warn!("skipping case {}: {err}", e.id());
                skipped.push(SkippedCase {
                    case_id: e.id(),
                    reason: err.to_string(),
                });
                continue;
            }
        };
        let volume = normalize_intensity(&v, norm);
        for (&id, name) in &labels.class_map {
            let gt = labels.class_mask(id);
            if gt.is_empty() {
                log::warn!("case {} class {name}: empty mask, not evaluated", e.id());
                continue;
            }
            targets.push(EvalTarget {
                case_id: e.id(),
                class_name: name.clone(),
                anatomy_tag: e.anatomy_tag.clone(),
                modality_tag: e.modality_tag.clone(),
                seen: if e.is_seen() { SeenFlag::Seen } else { SeenFlag::Unseen },
                volume: volume.clone(),
                gt,
            });
        }
    }
    (targets, skipped)
}

/// Sweep over a manifest. Records are sorted by (case, class).
pub fn run_prompt_sweep<F>(
    segment: F,
    manifest: &DatasetManifest,
    budgets: &[usize],
    seed: u64,
    norm: &Normalization,
) -> Result<(Vec<EvalRecord>, Vec<SkippedCase>)>
where
    F: Fn(&Volume, &[PointPrompt]) -> Result<BinaryMask>,
{
    let (targets, skipped) = load_eval_targets(manifest, norm);
    let mut records = evaluate_targets(segment, &targets, budgets, seed)?;
    records.sort_by(|a, b| (&a.case_id, &a.class_name).cmp(&(&b.case_id, &b.class_name)));
    Ok((records, skipped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Anatomy,
    Modality,
    /// Class name with lateral prefixes removed, so paired organs merge.
    Organ,
    Seen,
}

impl GroupBy {
    pub const ALL: [GroupBy; 4] = [GroupBy::Anatomy, GroupBy::Modality, GroupBy::Organ, GroupBy::Seen];

    pub fn name(&self) -> &'static str {
        match self {
            GroupBy::Anatomy => "anatomy",
            GroupBy::Modality => "modality",
            GroupBy::Organ => "organ",
            GroupBy::Seen => "seen",
        }
    }

    fn key(&self, r: &EvalRecord) -> String {
        match self {
            GroupBy::Anatomy => r.anatomy_tag.clone(),
            GroupBy::Modality => r.modality_tag.clone(),
            GroupBy::Organ => organ_name(&r.class_name).to_string(),
            GroupBy::Seen => match r.seen {
                SeenFlag::Seen => "seen".into(),
                SeenFlag::Unseen => "unseen".into(),
            },
        }
    }
}

impl FromStr for GroupBy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anatomy" => Ok(GroupBy::Anatomy),
            "modality" => Ok(GroupBy::Modality),
            "organ" => Ok(GroupBy::Organ),
            "seen" | "seen/unseen" => Ok(GroupBy::Seen),
            _ => Err(Error::Config(format!("unknown group key {s}"))),
        }
    }
}

/// Undoes the lateral split: `left_kidney` and `right_kidney` become
/// `kidney`.
pub fn organ_name(class_name: &str) -> &str {
    for p in ["left_", "right_"] {
        if class_name.len() > p.len() && class_name[..p.len()].eq_ignore_ascii_case(p) {
            return &class_name[p.len()..];
        }
    }
    class_name
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group_by: GroupBy,
    pub group: String,
    pub count: usize,
    pub mean_dice: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group_by: GroupBy,
    pub rows: Vec<GroupRow>,
}

/// Order-independent mean: values are sorted before summation.
fn mean(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean Dice per group and budget. Rows are sorted by group name.
pub fn aggregate_report(records: &[EvalRecord], group_by: GroupBy) -> Result<GroupReport> {
    if records.is_empty() {
        return Err(Error::Config("no evaluation records to aggregate".into()));
    }
    let mut groups: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(group_by.key(r)).or_default().push(r);
    }
    let rows = groups
        .into_iter()
        .map(|(group, rs)| {
            let mut per_budget: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in &rs {
                for (&b, &d) in &r.dice_at_budget {
                    per_budget.entry(b).or_default().push(d);
                }
            }
            GroupRow {
                group_by,
                group,
                count: rs.len(),
                mean_dice: per_budget.into_iter().map(|(b, v)| (b, mean(v))).collect(),
            }
        })
        .collect();
    Ok(GroupReport { group_by, rows })
}

impl GroupReport {
    pub fn to_table(&self) -> String {
        let budgets: Vec<usize> = {
            let mut b: Vec<usize> = self.rows.iter().flat_map(|r| r.mean_dice.keys().copied()).collect();
            b.sort_unstable();
            b.dedup();
            b
        };
        let width = self
            .rows
            .iter()
            .map(|r| r.group.len())
            .max()
            .unwrap_or(0)
            .max(self.group_by.name().len());
        let mut s = format!("{:<width$}  {:>5}", self.group_by.name(), "n");
        for b in &budgets {
            let _ = write!(s, "  {:>7}", format!("{b} pt"));
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{:<width$}  {:>5}", r.group, r.count);
            for b in &budgets {
                match r.mean_dice.get(b) {
                    Some(d) => {
                        let _ = write!(s, "  {:>7.4}", d);
                    }
                    None => s.push_str("        -"),
                }
            }
            s.push('\n');
        }
        s
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?);
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Writes `records.jsonl`, `timings.jsonl`, `summary.jsonl` (one row per
/// group under every grouping) and `report.txt`. Everything except the
/// timings file is a pure function of the records.
pub fn write_report(out_dir: &Path, records: &[EvalRecord]) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    write_jsonl(&out_dir.join("records.jsonl"), records)?;
    let timings: Vec<TimingRecord> = records
        .iter()
        .map(|r| TimingRecord {
            case_id: r.case_id.clone(),
            class_name: r.class_name.clone(),
            wall_time: r.wall_time.clone(),
        })
        .collect();
    write_jsonl(&out_dir.join("timings.jsonl"), &timings)?;
    let mut summary = Vec::new();
    let mut text = String::new();
    for g in GroupBy::ALL {
        let rep = aggregate_report(records, g)?;
        text.push_str(&rep.to_table());
        text.push('\n');
        summary.extend(rep.rows);
    }
    write_jsonl(&out_dir.join("summary.jsonl"), &summary)?;
    std::fs::write(out_dir.join("report.txt"), text)?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let raw = std::fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    raw.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
