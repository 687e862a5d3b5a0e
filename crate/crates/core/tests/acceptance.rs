//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use clothreid::clustering::dbscan;
use clothreid::contrast::{info_nce, record_total, self_identity_loss, Candidates, GroupSpan, SelfIdentityNorm};
use clothreid::encoder::{encode_checkpoint, EncoderParams};
use clothreid::evaluation::{cmc, mean_ap, EvalProtocol, MatchFlag};
use clothreid::memory::DualMemory;
use clothreid::numerics::{Matrix, Tape};
use clothreid::pipeline::{evaluate_encoder, run_training, sync_group_spread, EpochReport, PipelineConfig, SamplingMode};
use clothreid::world::{generate_world, Role, WorldConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let v = gaussian(rng, n);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

// ---------------------------------------------------------------- 1

struct GradProblem {
    inputs: Matrix,
    labels: Vec<usize>,
    spans: Vec<GroupSpan>,
    group_size: usize,
    candidates: Candidates,
    tau: f64,
    alpha: f64,
}

impl GradProblem {
    fn random(rng: &mut ChaCha8Rng, d: usize, f: usize) -> Self {
        let (groups, group_size, clusters) = (6, 3, 4);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut spans = Vec::new();
        for g in 0..groups {
            let label = g % clusters;
            spans.push(GroupSpan { pseudo_label: label, start: g * group_size, len: group_size });
            for _ in 0..group_size {
                rows.push(gaussian(rng, d));
                labels.push(label);
            }
        }
        let average = Matrix::from_rows(&(0..clusters).map(|_| unit(rng, f)).collect::<Vec<_>>()).unwrap();
        let hardest = Matrix::from_rows(&(0..clusters).map(|_| unit(rng, f)).collect::<Vec<_>>()).unwrap();
        GradProblem {
            inputs: Matrix::from_rows(&rows).unwrap(),
            labels,
            spans,
            group_size,
            candidates: Candidates::dual(&average, &hardest),
            tau: 0.1,
            alpha: 0.3,
        }
    }

    fn loss(&self, params: &EncoderParams) -> f64 {
        self.loss_and_grads(params).0
    }

    fn loss_and_grads(&self, params: &EncoderParams) -> (f64, Vec<Matrix>) {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(self.inputs.clone());
        let feats = params.forward(&mut tape, &bound, x).unwrap();
        let l_q = info_nce(&mut tape, feats, &self.labels, &self.candidates, self.tau).unwrap();
        let l_s =
            self_identity_loss(&mut tape, feats, &self.spans, self.group_size, SelfIdentityNorm::OrderedPairs).unwrap();
        let (root, _) = record_total(&mut tape, l_q, Some(l_s), self.alpha).unwrap();
        let grads = tape.backward(root).unwrap();
        (tape.value(root).get(0, 0), bound.vars().iter().map(|&v| grads.wrt(v)).collect())
    }
}

fn criterion_gradients() -> Outcome {
    let started = Instant::now();
    let (h, coords_per_seed) = (1e-5, 120);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let params = EncoderParams::init(&[16, 32, 32, 32], seed).unwrap();
        let problem = GradProblem::random(&mut rng, 16, 32);
        let (_, grads) = problem.loss_and_grads(&params);
        let sizes: Vec<usize> = params.tensors().iter().map(Matrix::len).collect();
        let total: usize = sizes.iter().sum();
        for flat in rand::seq::index::sample(&mut rng, total, coords_per_seed) {
            let (mut t, mut i) = (0, flat);
            while i >= sizes[t] {
                i -= sizes[t];
                t += 1;
            }
            let mut plus = params.clone();
            plus.tensors_mut()[t].as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[t].as_mut_slice()[i] -= h;
            let numeric = (problem.loss(&plus) - problem.loss(&minus)) / (2.0 * h);
            let analytic = grads[t].as_slice()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-4 && secs < 30.0,
        detail: format!("{checked} coordinates over 10 seeds, worst relative error {worst:.2e}, {secs:.1}s"),
    }
}

// ---------------------------------------------------------------- 2

fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Core points by neighbor count, union-find over core-core edges, borders
/// attached through their lowest-index core neighbor.
fn dbscan_oracle(x: &Matrix, eps: f64, m: usize) -> Vec<Option<usize>> {
    let n = x.rows();
    let near: Vec<Vec<bool>> =
        (0..n).map(|i| (0..n).map(|j| oracle_cosine(x.row(i), x.row(j)) <= eps).collect()).collect();
    let core: Vec<bool> = near.iter().map(|r| r.iter().filter(|&&b| b).count() >= m).collect();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && near[i][j] {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                Some(root(&mut parent, i))
            } else {
                (0..n).find(|&j| core[j] && near[i][j]).map(|j| root(&mut parent, j))
            }
        })
        .collect()
}

/// Same partition and same noise set, ignoring label names.
fn same_partition(a: &[Option<usize>], b: &[Option<usize>]) -> bool {
    use std::collections::HashMap;
    let (mut fwd, mut back) = (HashMap::new(), HashMap::new());
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| match (x, y) {
            (None, None) => true,
            (Some(x), Some(y)) => *fwd.entry(*x).or_insert(*y) == *y && *back.entry(*y).or_insert(*x) == *x,
            _ => false,
        })
}

fn criterion_dbscan() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut agree = 0;
    let (mut clusters, mut noise) = (0, 0);
    for instance in 0..50 {
        let n = rng.gen_range(20..=500);
        let dim = rng.gen_range(3..=8);
        let centers: Vec<Vec<f64>> = (0..rng.gen_range(2..=10)).map(|_| unit(&mut rng, dim)).collect();
        let spread = rng.gen_range(0.1..0.6);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let c = &centers[rng.gen_range(0..centers.len())];
                c.iter().map(|v| v + spread * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let x = Matrix::from_rows(&rows).unwrap();
        let eps = [0.2, 0.4, 0.6][instance % 3];
        let m = [2, 4][(instance / 3) % 2];
        let got = dbscan(&x, eps, m).unwrap();
        if same_partition(got.labels(), &dbscan_oracle(&x, eps, m)) {
            agree += 1;
        }
        clusters += got.num_clusters();
        noise += got.num_noise();
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: agree == 50 && secs < 30.0,
        detail: format!("{agree}/50 instances agree ({clusters} clusters, {noise} noise points in total), {secs:.1}s"),
    }
}

// ---------------------------------------------------------------- 3

/// Rank of gallery `g` for query row `q` among non-ignored entries, counted
/// directly: entries strictly closer, or equally close with a lower index.
fn counted_rank(dist: &[f64], flags: &[MatchFlag], g: usize) -> usize {
    (0..dist.len())
        .filter(|&o| flags[o] != MatchFlag::Ignore && (dist[o] < dist[g] || (dist[o] == dist[g] && o < g)))
        .count()
}

fn metric_oracle(dist: &Matrix, flags: &[Vec<MatchFlag>], ranks: &[usize]) -> (Vec<f64>, f64) {
    let mut hits = vec![0usize; ranks.len()];
    let mut ap_sum = 0.0;
    for (q, row) in flags.iter().enumerate() {
        let matches: Vec<usize> = (0..row.len()).filter(|&g| row[g] == MatchFlag::Match).collect();
        let match_ranks: Vec<usize> = matches.iter().map(|&g| counted_rank(dist.row(q), row, g)).collect();
        let first = *match_ranks.iter().min().unwrap();
        for (h, &k) in hits.iter_mut().zip(ranks) {
            if first < k {
                *h += 1;
            }
        }
        let ap: f64 = match_ranks
            .iter()
            .map(|&r| match_ranks.iter().filter(|&&o| o <= r).count() as f64 / (r + 1) as f64)
            .sum::<f64>()
            / matches.len() as f64;
        ap_sum += ap;
    }
    let nq = flags.len() as f64;
    (hits.into_iter().map(|h| h as f64 / nq).collect(), ap_sum / nq)
}

fn criterion_metrics() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ranks = [1, 5, 10, 20];
    let mut worst: f64 = 0.0;
    for instance in 0..100 {
        let (nq, ng) = if instance == 0 { (200, 500) } else { (rng.gen_range(1..=200), rng.gen_range(1..=500)) };
        // coarse grid so ties occur
        let levels = rng.gen_range(3..50);
        let data: Vec<f64> = (0..nq * ng).map(|_| rng.gen_range(0..levels) as f64 / levels as f64 * 2.0).collect();
        let dist = Matrix::from_vec(nq, ng, data).unwrap();
        let flags: Vec<Vec<MatchFlag>> = (0..nq)
            .map(|_| {
                let mut row: Vec<MatchFlag> = (0..ng)
                    .map(|_| match rng.gen_range(0..10) {
                        0 => MatchFlag::Match,
                        1 | 2 => MatchFlag::Ignore,
                        _ => MatchFlag::NonMatch,
                    })
                    .collect();
                row[rng.gen_range(0..ng)] = MatchFlag::Match;
                row
            })
            .collect();
        let (want_cmc, want_map) = metric_oracle(&dist, &flags, &ranks);
        let got_cmc = cmc(&dist, &flags, &ranks).unwrap();
        let got_map = mean_ap(&dist, &flags).unwrap();
        for (a, b) in got_cmc.iter().zip(&want_cmc) {
            worst = worst.max((a - b).abs());
        }
        worst = worst.max((got_map - want_map).abs());
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: worst <= 1e-12 && secs < 30.0,
        detail: format!("100 instances up to 200x500, max deviation {worst:.2e}, {secs:.1}s"),
    }
}

// ---------------------------------------------------------------- 4

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn criterion_memory() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (clusters, dim, s, k) = (6, 16, 2, 3);
    let bank = |rng: &mut ChaCha8Rng| Matrix::from_rows(&(0..clusters).map(|_| unit(rng, dim)).collect::<Vec<_>>()).unwrap();
    let mut frozen = DualMemory::from_banks(bank(&mut rng), bank(&mut rng), 1.0).unwrap();
    let (avg0, hard0) = (frozen.average().clone(), frozen.hardest().clone());
    let mut replace = DualMemory::from_banks(bank(&mut rng), bank(&mut rng), 0.0).unwrap();
    let (mut drift, mut replace_err): (f64, f64) = (0.0, 0.0);
    let mut hardest_agree = 0;
    for _ in 0..1000 {
        let cluster = rng.gen_range(0..clusters);
        let batch: Vec<Vec<f64>> = (0..(s + 1) * k).map(|_| unit(&mut rng, dim)).collect();
        let refs: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();

        frozen.update_average(cluster, &refs, s, k).unwrap();
        frozen.update_hard(cluster, &refs).unwrap();
        drift = drift
            .max(max_abs_diff(frozen.average().as_slice(), avg0.as_slice()))
            .max(max_abs_diff(frozen.hardest().as_slice(), hard0.as_slice()));

        let entry = replace.hardest().row(cluster).to_vec();
        let p_entry = softmax(&entry);
        let mut expected = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, f) in batch.iter().enumerate() {
            let p = softmax(f);
            let kl: f64 = p.iter().zip(&p_entry).map(|(a, b)| a * (a / b).ln()).sum();
            if kl > best {
                best = kl;
                expected = i;
            }
        }
        let picked = replace.update_hard(cluster, &refs).unwrap();
        if picked == expected {
            hardest_agree += 1;
        }
        replace_err = replace_err.max(max_abs_diff(replace.hardest().row(cluster), &normalized(&batch[expected])));

        let mean: Vec<f64> = (0..dim).map(|j| batch.iter().map(|f| f[j]).sum::<f64>() / batch.len() as f64).collect();
        replace.update_average(cluster, &refs, s, k).unwrap();
        replace_err = replace_err.max(max_abs_diff(replace.average().row(cluster), &normalized(&mean)));
    }
    let secs = started.elapsed().as_secs_f64();
    Outcome {
        pass: drift <= 1e-12 && replace_err <= 1e-12 && hardest_agree == 1000 && secs < 10.0,
        detail: format!(
            "m=1 drift {drift:.2e}, m=0 replacement error {replace_err:.2e}, hardest selection {hardest_agree}/1000, {secs:.1}s"
        ),
    }
}

// ---------------------------------------------------------------- 5-9

fn bench_world(seed: u64) -> WorldConfig {
    WorldConfig {
        num_identities: 50,
        clothes_per_identity: 4,
        samples_per_identity_clothing: 6,
        embedding_dim: 32,
        identity_dim: 16,
        clothing_dim: 16,
        identity_scale: 1.0,
        clothing_scale: 1.5,
        noise_scale: 0.15,
        train_identities: 25,
        seed,
        ..Default::default()
    }
}

fn bench_config(seed: u64) -> PipelineConfig {
    PipelineConfig {
        max_epochs: 40,
        hidden_widths: vec![256],
        tau: 0.1,
        init_seed: seed,
        sampling_seed: seed,
        template_seed: seed,
        ..Default::default()
    }
}

struct Run {
    rank1: f64,
    map: f64,
    spread: f64,
    secs: f64,
    /// Epoch at which clustering degenerated, if it did.
    stopped_at: Option<u32>,
}

/// Trains one seed. A run whose clustering drops below P clusters is scored
/// with the encoder from its last completed epoch.
fn train_and_score(config: &PipelineConfig, seed: u64) -> Run {
    let started = Instant::now();
    let (world, dataset) = generate_world(&bench_world(seed)).unwrap();
    let mut last: Option<(EncoderParams, u32)> = None;
    let result = run_training(config, world.clone(), dataset.clone(), |report, state| {
        last = Some((state.params.clone(), report.epoch));
        Ok(())
    });
    let stopped_at = result.err().map(|e| {
        eprintln!("  note: {e}");
        last.as_ref().map_or(1, |(_, epoch)| epoch + 1)
    });
    let params = match last {
        Some((p, _)) => p,
        None => EncoderParams::init(&config.widths(32), config.init_seed).unwrap(),
    };
    let metrics = evaluate_encoder(&params, &dataset, &EvalProtocol::default()).unwrap();
    let train = dataset.with_role(Role::Train);
    let templates = world.template_bank(config.template_bank_size, config.template_seed);
    let spread = sync_group_spread(&params, &world, &train, &templates, config.s, 7 + seed).unwrap();
    Run {
        rank1: metrics.rank(1).unwrap(),
        map: metrics.map,
        spread,
        secs: started.elapsed().as_secs_f64(),
        stopped_at,
    }
}

fn variant(name: &str, seeds: u64, f: impl Fn(PipelineConfig) -> PipelineConfig) -> Vec<Run> {
    (0..seeds)
        .map(|seed| {
            let run = train_and_score(&f(bench_config(seed)), seed);
            eprintln!(
                "  {name:<10} seed {seed}: rank1 {:.4} mAP {:.4} spread {:.5} {:.1}s{}",
                run.rank1,
                run.map,
                run.spread,
                run.secs,
                if run.stopped_at.is_some() { " (clustering degenerated)" } else { "" }
            );
            run
        })
        .collect()
}

fn mean(runs: &[Run], f: impl Fn(&Run) -> f64) -> f64 {
    runs.iter().map(f).sum::<f64>() / runs.len() as f64
}

fn flags(c: PipelineConfig, ca: bool, ci: bool, mode: SamplingMode) -> PipelineConfig {
    PipelineConfig { use_augmentation: ca, use_self_identity: ci, sampling_mode: mode, ..c }
}

fn criterion_determinism() -> Outcome {
    let config = bench_config(11);
    let run = || {
        let (world, dataset) = generate_world(&bench_world(11)).unwrap();
        let out = run_training(&config, world, dataset, |_, _| Ok(())).unwrap();
        (encode_checkpoint(&out.state.checkpoint()), out.reports)
    };
    let (ckpt_a, reports_a) = run();
    let (ckpt_b, reports_b) = run();
    let fp = |r: &[EpochReport]| r.iter().map(EpochReport::fingerprint).collect::<Vec<_>>();
    let same_ckpt = ckpt_a == ckpt_b;
    let same_reports = fp(&reports_a) == fp(&reports_b);
    Outcome {
        pass: same_ckpt && same_reports,
        detail: format!(
            "checkpoints {} ({} bytes), {} epoch reports {}",
            if same_ckpt { "identical" } else { "differ" },
            ckpt_a.len(),
            reports_a.len(),
            if same_reports { "identical" } else { "differ" }
        ),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut report = |name: &'static str, o: Outcome| {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((name, o));
    };

    report("1 gradient check", criterion_gradients());
    report("2 dbscan oracle", criterion_dbscan());
    report("3 metric oracle", criterion_metrics());
    report("4 memory algebra", criterion_memory());

    eprintln!("training benchmark variants");
    let full = variant("full", 5, |c| c);
    let baseline = variant("baseline", 3, |c| flags(c, false, false, SamplingMode::None));
    let ca_cs = variant("ca+cs", 3, |c| flags(c, true, false, SamplingMode::Both));
    let none = variant("none", 5, |c| flags(c, true, true, SamplingMode::None));
    let average = variant("average", 5, |c| flags(c, true, true, SamplingMode::Average));
    let hardest = variant("hardest", 5, |c| flags(c, true, true, SamplingMode::Hardest));
    let alpha0 = variant("alpha0", 3, |c| PipelineConfig { alpha: 0.0, ..c });
    let full3 = &full[..3];

    let (r1, map) = (mean(full3, |r| r.rank1), mean(full3, |r| r.map));
    let secs: f64 = full3.iter().map(|r| r.secs).sum();
    report(
        "5 benchmark",
        Outcome {
            pass: r1 >= 0.85 && map >= 0.70 && secs <= 300.0,
            detail: format!("full model rank-1 {r1:.4} (>= 0.85), mAP {map:.4} (>= 0.70), 3 seeds in {secs:.1}s (<= 300)"),
        },
    );

    let base_r1 = mean(&baseline, |r| r.rank1);
    let ca_cs_r1 = mean(&ca_cs, |r| r.rank1);
    report(
        "6 ablation direction",
        Outcome {
            pass: r1 >= base_r1 + 0.10 && r1 > ca_cs_r1,
            detail: format!(
                "full {r1:.4} vs baseline {base_r1:.4} (margin {:+.4}, need >= 0.10); full vs C_a+C_s without C_i {ca_cs_r1:.4} (margin {:+.4}, need > 0)",
                r1 - base_r1,
                r1 - ca_cs_r1
            ),
        },
    );

    let modes = [
        ("none", mean(&none, |r| r.rank1)),
        ("average", mean(&average, |r| r.rank1)),
        ("hardest", mean(&hardest, |r| r.rank1)),
        ("both", mean(&full, |r| r.rank1)),
    ];
    let both = modes[3].1;
    report(
        "7 sampling ablation",
        Outcome {
            pass: modes[..3].iter().all(|(_, v)| both > *v),
            detail: format!(
                "rank-1 over 5 seeds: {}",
                modes.iter().map(|(n, v)| format!("{n} {v:.4}")).collect::<Vec<_>>().join(", ")
            ),
        },
    );

    let (spread_on, spread_off) = (mean(full3, |r| r.spread), mean(&alpha0, |r| r.spread));
    report(
        "8 self-identity effect",
        Outcome {
            pass: spread_on < spread_off,
            detail: format!("sync-group spread alpha=0.3 {spread_on:.6} vs alpha=0 {spread_off:.6}"),
        },
    );

    report("9 determinism", criterion_determinism());

    let failed = results.iter().filter(|(_, o)| !o.pass).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
