//! Overlap scoring, the signed-rank test, and table rendering.
//!
//! Scores are Dice overlaps in percent. Model comparisons use the two-sided
//! Wilcoxon signed-rank test, exact by enumeration for small samples and
//! normal-approximated with tie correction above that. Reports are pure
//! functions of the result rows, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{Coding, LabelMap, Task};
use crate::error::{Error, Result};
use crate::losses::LossKind;

/// Dice overlap in percent, with a flag for the degenerate empty-vs-empty
/// case (scored 100 by convention, but callers may want to audit it).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub percent: f64,
    pub both_empty: bool,
}

/// 100 * 2|P and G| / (|P| + |G|) over flattened binary masks.
pub fn dsc(pred: &[bool], gt: &[bool]) -> Result<Overlap> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "dsc",
            format!("mask sizes differ: {} vs {}", pred.len(), gt.len()),
        ));
    }
    let mut inter = 0u64;
    let mut p = 0u64;
    let mut g = 0u64;
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as u64;
        g += b as u64;
        inter += (a && b) as u64;
    }
    if p + g == 0 {
        return Ok(Overlap { percent: 100.0, both_empty: true });
    }
    Ok(Overlap {
        percent: 100.0 * 2.0 * inter as f64 / (p + g) as f64,
        both_empty: false,
    })
}

/// Dice between two binary label maps; extents must match.
pub fn dsc_maps(pred: &LabelMap, gt: &LabelMap) -> Result<Overlap> {
    if pred.coding != Coding::Binary || gt.coding != Coding::Binary {
        return Err(Error::invalid("dsc", "label maps must be binary"));
    }
    if pred.extents != gt.extents {
        return Err(Error::invalid(
            "dsc",
            format!("extents differ: {:?} vs {:?}", pred.extents, gt.extents),
        ));
    }
    let a: Vec<bool> = pred.data.iter().map(|&c| c != 0).collect();
    let b: Vec<bool> = gt.data.iter().map(|&c| c != 0).collect();
    dsc(&a, &b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WilcoxonMode {
    /// Exact for n <= 12, approximate above.
    Auto,
    Exact,
    Approximate,
}

#[derive(Clone, Copy, Debug)]
pub struct WilcoxonOutcome {
    /// min(W+, W-), the smaller signed-rank sum
    pub statistic: f64,
    /// two-sided
    pub p_value: f64,
    /// pairs left after dropping zero differences
    pub n_effective: usize,
    pub exact: bool,
    /// all differences were zero; p is 1 by definition
    pub degenerate: bool,
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped; tied absolute differences get average ranks. Needs at least
/// 5 nonzero differences unless every difference is zero (that case is
/// degenerate with p = 1).
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonOutcome> {
    wilcoxon_signed_rank_mode(a, b, WilcoxonMode::Auto)
}

pub fn wilcoxon_signed_rank_mode(
    a: &[f64],
    b: &[f64],
    mode: WilcoxonMode,
) -> Result<WilcoxonOutcome> {
    if a.len() != b.len() {
        return Err(Error::invalid(
            "wilcoxon",
            format!("sample sizes differ: {} vs {}", a.len(), b.len()),
        ));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    for d in &diffs {
        if !d.is_finite() {
            return Err(Error::invalid("wilcoxon", "non-finite difference"));
        }
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonOutcome {
            statistic: 0.0,
            p_value: 1.0,
            n_effective: 0,
            exact: true,
            degenerate: true,
        });
    }
    if n < 5 {
        return Err(Error::invalid(
            "wilcoxon",
            format!("{n} nonzero differences; need at least 5"),
        ));
    }

    // tie-averaged ranks of |d|
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].abs().partial_cmp(&diffs[j].abs()).unwrap());
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].abs() == diffs[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }

    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = n as f64 * (n as f64 + 1.0) / 2.0;
    let w_min = w_plus.min(total - w_plus);

    let use_exact = match mode {
        WilcoxonMode::Exact => {
            if n > 20 {
                return Err(Error::invalid(
                    "wilcoxon",
                    format!("exact enumeration over 2^{n} refused; n > 20"),
                ));
            }
            true
        }
        WilcoxonMode::Approximate => false,
        WilcoxonMode::Auto => n <= 12,
    };

    let p_value = if use_exact {
        // enumerate all sign assignments; two-sided p doubles the tail at
        // or below the observed minimum rank sum
        let mut tail = 0u64;
        for signs in 0u64..(1u64 << n) {
            let mut w = 0.0f64;
            for (k, r) in ranks.iter().enumerate() {
                if signs >> k & 1 == 1 {
                    w += r;
                }
            }
            if w <= w_min + 1e-9 {
                tail += 1;
            }
        }
        (2.0 * tail as f64 / (1u64 << n) as f64).min(1.0)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let mut tie_term = 0.0f64;
        let mut sorted: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && sorted[j + 1] == sorted[i] {
                j += 1;
            }
            let t = (j - i + 1) as f64;
            tie_term += t * t * t - t;
            i = j + 1;
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Err(Error::invalid("wilcoxon", "zero variance after tie correction"));
        }
        // continuity-corrected z for the lower tail, doubled
        let z = (w_min - mean + 0.5) / var.sqrt();
        libm::erfc(-z / std::f64::consts::SQRT_2).min(1.0)
    };

    Ok(WilcoxonOutcome {
        statistic: w_min,
        p_value,
        n_effective: n,
        exact: use_exact,
        degenerate: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// sample standard deviation (n - 1 denominator), 0 for a single value
    pub std: f64,
    pub n: usize,
}

pub fn mean_std(xs: &[f64]) -> Option<MeanStd> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Some(MeanStd { mean, std, n })
}

/// Per-case Dice between two raters' masks, aggregated.
pub fn inter_rater_agreement(pairs: &[(&LabelMap, &LabelMap)]) -> Result<MeanStd> {
    if pairs.is_empty() {
        return Err(Error::invalid("inter_rater", "no mask pairs"));
    }
    let scores: Vec<f64> = pairs
        .iter()
        .map(|(a, b)| dsc_maps(a, b).map(|o| o.percent))
        .collect::<Result<_>>()?;
    Ok(mean_std(&scores).unwrap())
}

/// One evaluated segmentation, as stored in the delimited results files.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub case_id: String,
    pub task: Task,
    /// canonical acquisition order, lowercase tokens
    pub sequences: Vec<String>,
    /// model tag: "deepmedic" | "unet", optionally ":variant" for sweeps
    /// (loss sweeps use "arch:loss@params", transfer runs "unet:transfer")
    pub model: String,
    pub fold: String,
    pub rater: String,
    pub dsc_percent: f64,
}

pub const SEQUENCE_ORDER: [&str; 4] = ["t1w", "t1ce", "t2w", "flair"];

/// Model-tag suffix for a loss sweep run ("wce@omega=0.75" style); the
/// loss table groups rows by the part before '@'.
pub fn loss_tag(kind: &LossKind) -> String {
    match *kind {
        LossKind::CrossEntropy => "cross_entropy".into(),
        LossKind::WeightedCrossEntropy { omega } => format!("wce@omega={omega}"),
        LossKind::Focal { omega, gamma } => format!("focal@omega={omega},gamma={gamma}"),
        LossKind::SoftDice { .. } => "soft_dice".into(),
        LossKind::Combined { alpha } => format!("combined@alpha={alpha}"),
    }
}

/// Sort tokens into acquisition order and join with '+'.
pub fn canonical_sequences(seqs: &[String]) -> String {
    let mut toks: Vec<&str> = seqs.iter().map(|s| s.as_str()).collect();
    toks.sort_by_key(|t| SEQUENCE_ORDER.iter().position(|o| o == t).unwrap_or(usize::MAX));
    toks.join("+")
}

fn display_sequences(joined: &str) -> String {
    joined
        .split('+')
        .map(|t| match t {
            "t1w" => "T1w",
            "t1ce" => "T1ce",
            "t2w" => "T2w",
            "flair" => "FLAIR",
            other => other,
        })
        .collect::<Vec<_>>()
        .join("+")
}

/// The sequence subsets evaluated per task, in table row order.
pub fn sequence_rows(task: Task) -> Vec<Vec<&'static str>> {
    match task {
        Task::WholeTumor => vec![
            vec!["t1w"],
            vec!["t2w"],
            vec!["flair"],
            vec!["t1w", "t2w"],
            vec!["t1w", "flair"],
            vec!["t2w", "flair"],
            vec!["t1w", "t2w", "flair"],
        ],
        Task::TumorCore => vec![vec!["t1w"], vec!["t1ce"], vec!["t1w", "t1ce"]],
    }
}

const RESULTS_HEADER: &str = "case_id\ttask\tsequences\tmodel\tfold\trater\tdsc_percent";

/// Serialize rows to tab-separated text (sorted, so output is canonical).
pub fn write_results(rows: &[ResultRow]) -> String {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let mut out = String::from(RESULTS_HEADER);
    out.push('\n');
    for r in &sorted {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{:.6}",
            r.case_id,
            r.task,
            canonical_sequences(&r.sequences),
            r.model,
            r.fold,
            r.rater,
            r.dsc_percent
        );
    }
    out
}

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (a.task.to_string(), canonical_sequences(&a.sequences), &a.model, &a.fold, &a.rater, &a.case_id)
            .cmp(&(b.task.to_string(), canonical_sequences(&b.sequences), &b.model, &b.fold, &b.rater, &b.case_id))
    });
}

pub fn read_results(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULTS_HEADER => {}
        other => {
            return Err(Error::invalid(
                "results",
                format!("bad header line: {:?}", other.unwrap_or("")),
            ))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 7 {
            return Err(Error::invalid(
                "results",
                format!("line {}: {} fields, want 7", lineno + 2, fields.len()),
            ));
        }
        let task: Task = fields[1]
            .parse()
            .map_err(|_| Error::invalid("results", format!("line {}: unknown task {:?}", lineno + 2, fields[1])))?;
        let dsc_percent: f64 = fields[6]
            .parse()
            .map_err(|_| Error::invalid("results", format!("line {}: bad score {:?}", lineno + 2, fields[6])))?;
        if !dsc_percent.is_finite() {
            return Err(Error::invalid("results", format!("line {}: non-finite score", lineno + 2)));
        }
        rows.push(ResultRow {
            case_id: fields[0].to_string(),
            task,
            sequences: fields[2].split('+').map(|s| s.to_string()).collect(),
            model: fields[3].to_string(),
            fold: fields[4].to_string(),
            rater: fields[5].to_string(),
            dsc_percent,
        });
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportLayout {
    /// loss functions x {deepmedic, unet}, best weighting per row
    LossTable,
    /// sequence subsets x {deepmedic, unet}, both tasks, significance stars
    ArchTable,
    /// sequence subsets x {r1, r2}, panels without and with transfer
    TransferTable,
}

/// Rendered report: a fixed-width human-readable table and a delimited
/// cell dump with the same content.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub text: String,
    pub delimited: String,
}

const GAP: &str = "-";

fn fmt_ms(ms: Option<MeanStd>, star: bool) -> String {
    match ms {
        None => GAP.to_string(),
        Some(m) => {
            let s = format!("{:.2}±{:.2}", m.mean, m.std);
            if star {
                format!("{s}*")
            } else {
                s
            }
        }
    }
}

fn render_grid(title: &str, header: &[String], lines: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for line in lines {
        for (i, cell) in line.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    if !title.is_empty() {
        out.push_str(title);
        out.push('\n');
    }
    let fmt_line = |cells: &[String], widths: &[usize]| {
        let mut s = String::new();
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            s.push_str(cell);
            for _ in cell.chars().count()..widths[i] {
                s.push(' ');
            }
        }
        s.trim_end().to_string()
    };
    out.push_str(&fmt_line(header, &widths));
    out.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for line in lines {
        out.push_str(&fmt_line(line, &widths));
        out.push('\n');
    }
    out
}

struct CellDump {
    lines: Vec<String>,
}

impl CellDump {
    fn new() -> Self {
        CellDump {
            lines: vec!["section\trow\tcolumn\tmean\tstd\tn\tmarker".to_string()],
        }
    }

    fn push(&mut self, section: &str, row: &str, col: &str, ms: Option<MeanStd>, marker: &str) {
        let line = match ms {
            None => format!("{section}\t{row}\t{col}\t\t\t0\tgap"),
            Some(m) => format!(
                "{section}\t{row}\t{col}\t{:.4}\t{:.4}\t{}\t{marker}",
                m.mean, m.std, m.n
            ),
        };
        self.lines.push(line);
    }

    fn finish(self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }
}

/// Mean score per case (duplicate rows for a case are averaged first), for
/// pairing across models.
fn per_case(rows: &[&ResultRow]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows {
        let e = acc.entry(r.case_id.clone()).or_insert((0.0, 0));
        e.0 += r.dsc_percent;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn scores(rows: &[&ResultRow]) -> Vec<f64> {
    rows.iter().map(|r| r.dsc_percent).collect()
}

/// Render a report layout from result rows. Pure: equal row sets give
/// byte-identical output regardless of input order.
pub fn emit_report(rows: &[ResultRow], layout: ReportLayout) -> Report {
    let mut sorted = rows.to_vec();
    sort_rows(&mut sorted);
    let rows = &sorted;
    match layout {
        ReportLayout::LossTable => loss_table(rows),
        ReportLayout::ArchTable => arch_table(rows),
        ReportLayout::TransferTable => transfer_table(rows),
    }
}

fn loss_table(rows: &[ResultRow]) -> Report {
    let losses = ["wce", "focal", "soft_dice", "combined"];
    let archs = ["deepmedic", "unet"];
    let mut dump = CellDump::new();
    let header: Vec<String> = ["loss", "weighting", "deepmedic", "unet"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut lines = Vec::new();
    for loss in losses {
        // variants are "arch:loss@params"; pick the params with the best
        // score pooled over both architectures
        let mut by_param: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for r in rows {
            if let Some((_, variant)) = r.model.split_once(':') {
                let (vloss, params) = variant.split_once('@').unwrap_or((variant, ""));
                if vloss == loss {
                    by_param.entry(params.to_string()).or_default().push(r.dsc_percent);
                }
            }
        }
        let best_param = by_param
            .iter()
            .map(|(p, xs)| (p.clone(), xs.iter().sum::<f64>() / xs.len() as f64))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(p, _)| p);
        let weighting = match &best_param {
            Some(p) if !p.is_empty() => p.clone(),
            _ => GAP.to_string(),
        };
        let mut line = vec![loss.to_string(), weighting.clone()];
        for arch in archs {
            let wanted_prefix = match &best_param {
                Some(p) if !p.is_empty() => format!("{arch}:{loss}@{p}"),
                _ => format!("{arch}:{loss}"),
            };
            let cell_rows: Vec<&ResultRow> =
                rows.iter().filter(|r| r.model == wanted_prefix).collect();
            let ms = mean_std(&scores(&cell_rows));
            dump.push("loss", loss, arch, ms, "");
            line.push(fmt_ms(ms, false));
        }
        lines.push(line);
    }
    let text = render_grid("loss functions, whole tumor", &header, &lines);
    Report { text, delimited: dump.finish() }
}

fn arch_table(rows: &[ResultRow]) -> Report {
    let archs = ["deepmedic", "unet"];
    let mut dump = CellDump::new();
    let header: Vec<String> = ["task", "sequences", "deepmedic", "unet"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut lines = Vec::new();
    for task in [Task::WholeTumor, Task::TumorCore] {
        for seqs in sequence_rows(task) {
            let joined = seqs.join("+");
            let mut cells: Vec<Option<MeanStd>> = Vec::new();
            let mut paired: Vec<BTreeMap<String, f64>> = Vec::new();
            for arch in archs {
                let cell_rows: Vec<&ResultRow> = rows
                    .iter()
                    .filter(|r| {
                        r.task == task && canonical_sequences(&r.sequences) == joined && r.model == arch
                    })
                    .collect();
                cells.push(mean_std(&scores(&cell_rows)));
                paired.push(per_case(&cell_rows));
            }
            // star the better cell when the paired difference is significant
            let mut star = [false, false];
            let common: Vec<&String> =
                paired[0].keys().filter(|k| paired[1].contains_key(*k)).collect();
            if common.len() >= 5 {
                let a: Vec<f64> = common.iter().map(|k| paired[0][*k]).collect();
                let b: Vec<f64> = common.iter().map(|k| paired[1][*k]).collect();
                if let Ok(w) = wilcoxon_signed_rank(&a, &b) {
                    if !w.degenerate && w.p_value < 0.05 {
                        let ma = a.iter().sum::<f64>() / a.len() as f64;
                        let mb = b.iter().sum::<f64>() / b.len() as f64;
                        star[if mb > ma { 1 } else { 0 }] = true;
                    }
                }
            }
            let row_label = display_sequences(&joined);
            let mut line = vec![task.label().to_string(), row_label.clone()];
            for (i, arch) in archs.iter().enumerate() {
                dump.push(task.label(), &joined, arch, cells[i], if star[i] { "*" } else { "" });
                line.push(fmt_ms(cells[i], star[i]));
            }
            lines.push(line);
        }
    }
    let mut text = render_grid("architectures by sequence set", &header, &lines);
    text.push_str("* better under two-sided wilcoxon signed rank, p < 0.05\n");
    Report { text, delimited: dump.finish() }
}

fn transfer_table(rows: &[ResultRow]) -> Report {
    let raters = ["r1", "r2"];
    let panels = [("a. no transfer learning", "unet"), ("b. transfer learning", "unet:transfer")];
    let mut dump = CellDump::new();
    let header: Vec<String> =
        ["task", "sequences", "r1", "r2"].iter().map(|s| s.to_string()).collect();
    let mut text = String::new();
    for (i, (title, model)) in panels.iter().enumerate() {
        let mut lines = Vec::new();
        for task in [Task::WholeTumor, Task::TumorCore] {
            for seqs in sequence_rows(task) {
                let joined = seqs.join("+");
                let mut line = vec![task.label().to_string(), display_sequences(&joined)];
                for rater in raters {
                    let cell_rows: Vec<&ResultRow> = rows
                        .iter()
                        .filter(|r| {
                            r.task == task
                                && canonical_sequences(&r.sequences) == joined
                                && r.model == *model
                                && r.rater == rater
                        })
                        .collect();
                    let ms = mean_std(&scores(&cell_rows));
                    dump.push(title, &joined, rater, ms, "");
                    line.push(fmt_ms(ms, false));
                }
                lines.push(line);
            }
        }
        if i > 0 {
            text.push('\n');
        }
        text.push_str(&render_grid(title, &header, &lines));
    }
    Report { text, delimited: dump.finish() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_over_ties() {
        let a = [3.0, 5.0, 9.0, 1.0, 1.0, 12.0];
        let b = [1.0, 3.0, 7.0, 3.0, 3.0, 6.0];
        // |d| = 2,2,2,2,2,6: the five tied 2s share rank 3, the 6 gets 6
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        // w+ = 3+3+3+6 = 15, w- = 3+3 = 6
        assert!((w.statistic - 6.0).abs() < 1e-12);
    }
}
