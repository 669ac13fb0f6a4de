use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxelbench::data::{Coding, LabelMap, Task};
use voxelbench::stats::{
    canonical_sequences, dsc, dsc_maps, emit_report, inter_rater_agreement, mean_std,
    read_results, sequence_rows, wilcoxon_signed_rank, wilcoxon_signed_rank_mode, write_results,
    Report, ReportLayout, ResultRow, WilcoxonMode,
};

#[test]
fn identical_nonempty_masks_score_100() {
    let m = vec![true, false, true, true];
    let o = dsc(&m, &m).unwrap();
    assert_eq!(o.percent, 100.0);
    assert!(!o.both_empty);
}

#[test]
fn two_of_three_overlap_scores_two_thirds() {
    // |P| = |G| = 3 with overlap 2: 100 * 4/6
    let p = vec![true, true, true, false, false, false];
    let g = vec![true, true, false, true, false, false];
    let o = dsc(&p, &g).unwrap();
    assert!((o.percent - 100.0 * 4.0 / 6.0).abs() < 1e-12);
}

#[test]
fn empty_vs_empty_is_100_with_flag() {
    let m = vec![false; 10];
    let o = dsc(&m, &m).unwrap();
    assert_eq!(o.percent, 100.0);
    assert!(o.both_empty);
}

#[test]
fn empty_vs_nonempty_is_zero() {
    let o = dsc(&[false, false], &[true, false]).unwrap();
    assert_eq!(o.percent, 0.0);
    assert!(!o.both_empty);
}

#[test]
fn mask_size_mismatch_rejected() {
    assert!(dsc(&[true], &[true, false]).is_err());
    let a = LabelMap::new([2, 2, 2], vec![1; 8], Coding::Binary).unwrap();
    let b = LabelMap::new([2, 2, 1], vec![1; 4], Coding::Binary).unwrap();
    assert!(dsc_maps(&a, &b).is_err());
}

#[test]
fn dice_matches_brute_force_on_random_cubes() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let n = 512;
        let p: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let g: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let o = dsc(&p, &g).unwrap();
        let mut inter = 0u64;
        let mut np = 0u64;
        let mut ng = 0u64;
        for i in 0..n {
            if p[i] {
                np += 1;
            }
            if g[i] {
                ng += 1;
            }
            if p[i] && g[i] {
                inter += 1;
            }
        }
        let want = if np + ng == 0 {
            100.0
        } else {
            100.0 * 2.0 * inter as f64 / (np + ng) as f64
        };
        assert_eq!(o.percent, want);
    }
}

#[test]
fn dice_is_symmetric_and_permutation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 300;
    let p: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    let g: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.2)).collect();
    assert_eq!(dsc(&p, &g).unwrap().percent, dsc(&g, &p).unwrap().percent);

    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    let pp: Vec<bool> = perm.iter().map(|&i| p[i]).collect();
    let gp: Vec<bool> = perm.iter().map(|&i| g[i]).collect();
    assert_eq!(dsc(&p, &g).unwrap().percent, dsc(&pp, &gp).unwrap().percent);
}

// independent signed-rank oracle: recompute ranks by sorting, enumerate
// every sign assignment, count the tail directly
fn oracle_wilcoxon(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = d.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| d[i].abs().partial_cmp(&d[j].abs()).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        for k in i..=j {
            ranks[idx[k]] = (i + j) as f64 / 2.0 + 1.0;
        }
        i = j + 1;
    }
    let wp: f64 = (0..n).filter(|&k| d[k] > 0.0).map(|k| ranks[k]).sum();
    let total: f64 = ranks.iter().sum();
    let wmin = wp.min(total - wp);
    let mut tail = 0u64;
    for signs in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|&k| signs >> k & 1 == 1).map(|k| ranks[k]).sum();
        if w <= wmin + 1e-9 {
            tail += 1;
        }
    }
    (wmin, (2.0 * tail as f64 / (1u64 << n) as f64).min(1.0))
}

#[test]
fn equal_samples_are_degenerate() {
    let a = [70.0, 80.0, 90.0, 60.0, 75.0];
    let w = wilcoxon_signed_rank(&a, &a).unwrap();
    assert!(w.degenerate);
    assert_eq!(w.p_value, 1.0);
    assert_eq!(w.n_effective, 0);
}

#[test]
fn six_one_sided_differences_give_p_2_over_64() {
    let b = [0.0; 6];
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
    let w = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(w.exact);
    assert_eq!(w.statistic, 0.0);
    assert!((w.p_value - 0.03125).abs() < 1e-12, "p = {}", w.p_value);
}

#[test]
fn exact_mode_matches_enumeration_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    for n in 5..=10usize {
        for _ in 0..6 {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(50.0..95.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(50.0..95.0)).collect();
            let w = wilcoxon_signed_rank(&a, &b).unwrap();
            let (ow, op) = oracle_wilcoxon(&a, &b);
            assert!(w.exact);
            assert_eq!(w.statistic, ow, "n={n}");
            assert!((w.p_value - op).abs() < 1e-12, "n={n}: {} vs {op}", w.p_value);
        }
    }
}

#[test]
fn tied_differences_match_enumeration_oracle() {
    // quantized scores force tied |differences|
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..10 {
        let n = 9;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0..12) as f64).collect();
        let nonzero = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        if nonzero < 5 {
            continue;
        }
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        let (ow, op) = oracle_wilcoxon(&a, &b);
        assert_eq!(w.statistic, ow);
        assert!((w.p_value - op).abs() < 1e-12);
    }
}

#[test]
fn approximation_tracks_exact_at_n10() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..20 {
        let n = 10;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(50.0..95.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.gen_range(-6.0..9.0)).collect();
        let e = wilcoxon_signed_rank_mode(&a, &b, WilcoxonMode::Exact).unwrap();
        let q = wilcoxon_signed_rank_mode(&a, &b, WilcoxonMode::Approximate).unwrap();
        assert!(e.exact && !q.exact);
        assert!(
            (e.p_value - q.p_value).abs() < 0.02,
            "exact {} approx {}",
            e.p_value,
            q.p_value
        );
    }
}

#[test]
fn large_sample_uses_approximation_and_stays_close() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 14;
    let a: Vec<f64> = (0..n).map(|_| rng.gen_range(60.0..90.0)).collect();
    let b: Vec<f64> = a.iter().map(|x| x + rng.gen_range(-4.0..6.0)).collect();
    let w = wilcoxon_signed_rank(&a, &b).unwrap();
    assert!(!w.exact);
    assert!(w.p_value > 0.0 && w.p_value <= 1.0);
    let e = wilcoxon_signed_rank_mode(&a, &b, WilcoxonMode::Exact).unwrap();
    assert!((w.p_value - e.p_value).abs() < 0.02);
}

#[test]
fn too_few_nonzero_differences_rejected() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [0.0, 0.0, 0.0, 0.0];
    assert!(wilcoxon_signed_rank(&a, &b).is_err());
    // 8 pairs but only 3 differ
    let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
    let mut b = a;
    b[0] += 1.0;
    b[3] -= 2.0;
    b[7] += 0.5;
    assert!(wilcoxon_signed_rank(&a, &b).is_err());
    assert!(wilcoxon_signed_rank(&[1.0], &[1.0, 2.0]).is_err());
}

#[test]
fn p_values_stay_in_unit_interval() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for n in [5usize, 8, 12, 13, 20, 40] {
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..100.0)).collect();
        let w = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!(w.p_value > 0.0 && w.p_value <= 1.0, "n={n}: {}", w.p_value);
        assert_eq!(w.exact, n <= 12);
    }
}

fn cube_labels(seed: u64, fill: f64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LabelMap::new(
        [6, 6, 6],
        (0..216).map(|_| rng.gen_bool(fill) as u8).collect(),
        Coding::Binary,
    )
    .unwrap()
}

#[test]
fn inter_rater_identity_and_disjoint() {
    let a = cube_labels(1, 0.3);
    let same = inter_rater_agreement(&[(&a, &a), (&a, &a)]).unwrap();
    assert_eq!(same.mean, 100.0);
    assert_eq!(same.std, 0.0);

    let left = LabelMap::new([2, 2, 2], vec![1, 1, 0, 0, 0, 0, 0, 0], Coding::Binary).unwrap();
    let right = LabelMap::new([2, 2, 2], vec![0, 0, 0, 0, 1, 1, 0, 0], Coding::Binary).unwrap();
    let disjoint = inter_rater_agreement(&[(&left, &right)]).unwrap();
    assert_eq!(disjoint.mean, 0.0);
}

#[test]
fn inter_rater_matches_per_case_oracle() {
    let pairs: Vec<(LabelMap, LabelMap)> =
        (0..6).map(|i| (cube_labels(10 + i, 0.3), cube_labels(40 + i, 0.35))).collect();
    let refs: Vec<(&LabelMap, &LabelMap)> = pairs.iter().map(|(a, b)| (a, b)).collect();
    let got = inter_rater_agreement(&refs).unwrap();
    let per_case: Vec<f64> =
        refs.iter().map(|(a, b)| dsc_maps(a, b).unwrap().percent).collect();
    let want = mean_std(&per_case).unwrap();
    assert_eq!(got.mean, want.mean);
    assert_eq!(got.std, want.std);
    assert_eq!(got.n, 6);
}

#[test]
fn sample_std_uses_n_minus_one() {
    let m = mean_std(&[1.0, 2.0, 3.0]).unwrap();
    assert!((m.mean - 2.0).abs() < 1e-12);
    assert!((m.std - 1.0).abs() < 1e-12);
    assert_eq!(mean_std(&[5.0]).unwrap().std, 0.0);
    assert!(mean_std(&[]).is_none());
}

fn row(
    case: &str,
    task: Task,
    seqs: &[&str],
    model: &str,
    rater: &str,
    score: f64,
) -> ResultRow {
    ResultRow {
        case_id: case.to_string(),
        task,
        sequences: seqs.iter().map(|s| s.to_string()).collect(),
        model: model.to_string(),
        fold: "ens".to_string(),
        rater: rater.to_string(),
        dsc_percent: score,
    }
}

#[test]
fn results_file_round_trips() {
    let rows = vec![
        row("case003", Task::WholeTumor, &["flair", "t1w"], "unet", "r1", 84.25),
        row("case001", Task::TumorCore, &["t1ce"], "deepmedic", "r1", 69.5),
        row("case002", Task::WholeTumor, &["t2w"], "unet:transfer", "r2", 77.125),
    ];
    let text = write_results(&rows);
    let back = read_results(&text).unwrap();
    assert_eq!(back.len(), 3);
    // canonical order in the file: whole_tumor t1w+flair before t2w row
    assert_eq!(back[0].case_id, "case001");
    let reparsed = read_results(&write_results(&back)).unwrap();
    assert_eq!(back, reparsed);
    assert_eq!(canonical_sequences(&back[1].sequences), "t1w+flair");

    assert!(read_results("nope\n").is_err());
    assert!(read_results(&format!("{}\nx\ty\tz\n", text.lines().next().unwrap())).is_err());
}

#[test]
fn sequence_row_sets_match_study_design() {
    let wt = sequence_rows(Task::WholeTumor);
    assert_eq!(wt.len(), 7);
    assert_eq!(wt[0], vec!["t1w"]);
    assert_eq!(wt[3], vec!["t1w", "t2w"]);
    assert_eq!(wt[6], vec!["t1w", "t2w", "flair"]);
    let tc = sequence_rows(Task::TumorCore);
    assert_eq!(tc, vec![vec!["t1w"], vec!["t1ce"], vec!["t1w", "t1ce"]]);
}

fn full_arch_rows() -> Vec<ResultRow> {
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for task in [Task::WholeTumor, Task::TumorCore] {
        for seqs in sequence_rows(task) {
            let seqs: Vec<&str> = seqs.to_vec();
            for case in 0..8 {
                let base = 70.0 + rng.gen_range(-8.0..8.0);
                rows.push(row(&format!("case{case:03}"), task, &seqs, "deepmedic", "r1", base));
                // unet clearly better only on the flair row
                let lift = if seqs == ["flair"] { 6.0 + rng.gen_range(0.0..2.0) } else { rng.gen_range(-0.5..0.5) };
                rows.push(row(&format!("case{case:03}"), task, &seqs, "unet", "r1", base + lift));
            }
        }
    }
    rows
}

#[test]
fn arch_table_has_ten_rows_and_stars_significant_cells() {
    let rows = full_arch_rows();
    let rep = emit_report(&rows, ReportLayout::ArchTable);
    let body: Vec<&str> = rep
        .text
        .lines()
        .filter(|l| l.starts_with("whole_tumor") || l.starts_with("tumor_core"))
        .collect();
    assert_eq!(body.len(), 10);
    assert_eq!(body.iter().filter(|l| l.starts_with("whole_tumor")).count(), 7);
    let flair_line = body.iter().find(|l| l.contains(" FLAIR ")).unwrap();
    assert!(flair_line.contains('*'), "no star: {flair_line}");
    // only the flair row is starred
    assert_eq!(rep.text.matches('*').count(), 2, "{}", rep.text); // cell star + legend
    assert_eq!(rep.delimited.lines().count(), 21); // header + 10 rows x 2 cells
}

#[test]
fn arch_table_is_pure_and_order_insensitive() {
    let rows = full_arch_rows();
    let a = emit_report(&rows, ReportLayout::ArchTable);
    let mut shuffled = rows.clone();
    shuffled.reverse();
    let b = emit_report(&shuffled, ReportLayout::ArchTable);
    assert_eq!(a, b);
    let c = emit_report(&rows, ReportLayout::ArchTable);
    assert_eq!(a.text, c.text);
    assert_eq!(a.delimited, c.delimited);
}

#[test]
fn missing_cells_render_gaps() {
    let rows = vec![row("case000", Task::WholeTumor, &["flair"], "unet", "r1", 82.0)];
    let rep = emit_report(&rows, ReportLayout::ArchTable);
    let t1w_line = rep.text.lines().find(|l| l.contains(" T1w ")).unwrap();
    assert!(t1w_line.trim_end().ends_with('-'), "{t1w_line}");
    let empty = emit_report(&[], ReportLayout::ArchTable);
    assert_eq!(empty.text.matches('-').count() > 10, true);
    assert_eq!(empty.delimited.lines().count(), 21);
    for line in empty.delimited.lines().skip(1) {
        assert!(line.ends_with("gap"));
    }
}

#[test]
fn loss_table_picks_best_weighting_per_row() {
    let mut rows = Vec::new();
    for (case, base) in [(0, 80.0), (1, 84.0), (2, 88.0)] {
        let id = format!("case{case:03}");
        for arch in ["deepmedic", "unet"] {
            let arch_lift = if arch == "unet" { 2.0 } else { 0.0 };
            for (variant, lift) in [
                ("wce@omega=0.5", -3.0),
                ("wce@omega=0.75", -1.0),
                ("focal@omega=0.75,gamma=1.5", -0.5),
                ("soft_dice", 0.5),
                ("combined@alpha=0.5", 1.5),
                ("combined@alpha=0.7", 0.2),
            ] {
                rows.push(row(
                    &id,
                    Task::WholeTumor,
                    &["t1w", "t1ce", "t2w", "flair"],
                    &format!("{arch}:{variant}"),
                    "r1",
                    base + lift + arch_lift + case as f64 * 0.01,
                ));
            }
        }
    }
    let rep = emit_report(&rows, ReportLayout::LossTable);
    let body: Vec<&str> = rep
        .text
        .lines()
        .filter(|l| {
            l.starts_with("wce") || l.starts_with("focal") || l.starts_with("soft_dice")
                || l.starts_with("combined")
        })
        .collect();
    assert_eq!(body.len(), 4);
    assert!(body[0].contains("omega=0.75"), "{}", body[0]);
    assert!(body[3].contains("alpha=0.5"), "{}", body[3]);
    let sd_line = body[2];
    assert!(sd_line.split_whitespace().nth(1) == Some("-"), "{sd_line}");
    // rerun byte-identical
    assert_eq!(rep, emit_report(&rows, ReportLayout::LossTable));
}

#[test]
fn transfer_table_has_two_panels_with_rater_columns() {
    let mut rows = Vec::new();
    for model in ["unet", "unet:transfer"] {
        for rater in ["r1", "r2"] {
            for case in 0..4 {
                rows.push(row(
                    &format!("case{case:03}"),
                    Task::TumorCore,
                    &["t1w", "t1ce"],
                    model,
                    rater,
                    60.0 + case as f64,
                ));
            }
        }
    }
    let rep = emit_report(&rows, ReportLayout::TransferTable);
    assert!(rep.text.contains("a. no transfer learning"));
    assert!(rep.text.contains("b. transfer learning"));
    let headers: Vec<&str> = rep.text.lines().filter(|l| l.starts_with("task ")).collect();
    assert_eq!(headers.len(), 2);
    for h in headers {
        assert!(h.contains("r1") && h.contains("r2"));
    }
    // each panel carries the full 7 + 3 row structure
    let body = rep
        .text
        .lines()
        .filter(|l| l.starts_with("whole_tumor") || l.starts_with("tumor_core"))
        .count();
    assert_eq!(body, 20);
    let filled: Vec<&str> =
        rep.delimited.lines().filter(|l| !l.ends_with("gap") && !l.starts_with("section")).collect();
    assert_eq!(filled.len(), 4); // t1w+t1ce row x 2 panels x 2 raters
    for line in &filled {
        assert!(line.contains("61.5000"), "{line}");
    }
}

fn report_all(rows: &[ResultRow]) -> [Report; 3] {
    [
        emit_report(rows, ReportLayout::LossTable),
        emit_report(rows, ReportLayout::ArchTable),
        emit_report(rows, ReportLayout::TransferTable),
    ]
}

#[test]
fn reports_are_deterministic_across_reruns() {
    let rows = full_arch_rows();
    let a = report_all(&rows);
    let b = report_all(&rows);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x, y);
    }
}
