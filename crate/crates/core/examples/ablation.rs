//! Trains ablation variants on the benchmark world and prints metrics.
//!
//! cargo run --release -p clothreid --example ablation -- [seeds] [epochs] [key=value ...]
//!
//! Extra `key=value` arguments override pipeline config fields; `world.<field>`
//! overrides the world (identity_scale, clothing_scale, noise_scale,
//! identity_dim, clothing_dim).

use std::time::Instant;

use clothreid::evaluation::EvalProtocol;
use clothreid::pipeline::{evaluate_encoder, run_training, sync_group_spread, PipelineConfig, SamplingMode};
use clothreid::world::{generate_world, Role, WorldConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(3);
    let epochs: u32 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let mut base = PipelineConfig { max_epochs: epochs, ..Default::default() };
    let mut world_cfg = WorldConfig { clothing_scale: 1.5, noise_scale: 0.15, ..Default::default() };
    for kv in args.iter().skip(2) {
        let (k, v) = kv.split_once('=').expect("key=value");
        match k.strip_prefix("world.") {
            Some("identity_scale") => world_cfg.identity_scale = v.parse().unwrap(),
            Some("clothing_scale") => world_cfg.clothing_scale = v.parse().unwrap(),
            Some("noise_scale") => world_cfg.noise_scale = v.parse().unwrap(),
            Some("identity_dim") => world_cfg.identity_dim = v.parse().unwrap(),
            Some("clothing_dim") => world_cfg.clothing_dim = v.parse().unwrap(),
            Some(other) => panic!("unknown world field {other}"),
            None => base.set(k, v).unwrap(),
        }
    }

    let variants: Vec<(&str, PipelineConfig)> = vec![
        ("baseline", PipelineConfig { max_epochs: epochs, ..base_flags(&base, false, false, SamplingMode::None) }),
        ("ca", base_flags(&base, true, false, SamplingMode::None)),
        ("ca+cs", base_flags(&base, true, false, SamplingMode::Both)),
        ("full", base_flags(&base, true, true, SamplingMode::Both)),
        ("full/none", base_flags(&base, true, true, SamplingMode::None)),
        ("full/average", base_flags(&base, true, true, SamplingMode::Average)),
        ("full/hardest", base_flags(&base, true, true, SamplingMode::Hardest)),
        ("full/alpha0", PipelineConfig { alpha: 0.0, ..base_flags(&base, true, true, SamplingMode::Both) }),
    ];
    let filter: Option<Vec<String>> = std::env::var("VARIANTS").ok().map(|v| v.split(',').map(String::from).collect());

    for (name, cfg) in variants {
        if filter.as_ref().is_some_and(|f| !f.iter().any(|x| x == name)) {
            continue;
        }
        let started = Instant::now();
        let (mut r1, mut map, mut spread) = (0.0, 0.0, 0.0);
        let mut per_seed = Vec::new();
        for seed in 0..seeds {
            let wc = WorldConfig { seed, ..world_cfg.clone() };
            let (world, dataset) = generate_world(&wc).unwrap();
            let cfg = PipelineConfig { init_seed: seed, sampling_seed: seed, template_seed: seed, ..cfg.clone() };
            let verbose = std::env::var("VERBOSE").is_ok();
            let mut last = None;
            let result = run_training(&cfg, world.clone(), dataset.clone(), |r, state| {
                last = Some((state.params.clone(), r.clone()));
                if verbose {
                    let labeling = clothreid::pipeline::cluster_train(state, &cfg)?;
                    let train = state.train_samples();
                    let mut pure = 0;
                    for members in labeling.clusters() {
                        let mut counts = std::collections::HashMap::new();
                        for &i in &members {
                            *counts.entry(train[i].identity_id).or_insert(0) += 1;
                        }
                        pure += counts.values().max().copied().unwrap_or(0);
                    }
                    let purity = pure as f64 / labeling.num_clustered().max(1) as f64;
                    let m = evaluate_encoder(&state.params, &state.dataset, &EvalProtocol::default())?;
                    println!(
                        "  {name} s{seed} e{} c{} pur {purity:.3} lq {:.3} ls {:.5} r1 {:.3} mAP {:.3}",
                        r.epoch,
                        r.num_clusters,
                        r.mean_l_q,
                        r.mean_l_s,
                        m.rank(1).unwrap(),
                        m.map
                    );
                }
                Ok(())
            });
            if let Err(e) = &result {
                println!("{name} seed {seed}: {e}");
            }
            let Some((params, last)) = last else { continue };
            let m = evaluate_encoder(&params, &dataset, &EvalProtocol::default()).unwrap();
            let train = dataset.with_role(Role::Train);
            let templates = world.template_bank(cfg.template_bank_size, cfg.template_seed);
            let sp = sync_group_spread(&params, &world, &train, &templates, 4, 99).unwrap();
            per_seed.push(format!("{:.3}/{:.3}(c{} n{})", m.rank(1).unwrap(), m.map, last.num_clusters, last.num_noise));
            r1 += m.rank(1).unwrap();
            map += m.map;
            spread += sp;
        }
        let n = seeds as f64;
        println!(
            "{name:14} rank1 {:.4} mAP {:.4} spread {:.4}  [{}] {:.1}s",
            r1 / n,
            map / n,
            spread / n,
            per_seed.join(" "),
            started.elapsed().as_secs_f64()
        );
    }
}

fn base_flags(base: &PipelineConfig, ca: bool, ci: bool, mode: SamplingMode) -> PipelineConfig {
    PipelineConfig { use_augmentation: ca, use_self_identity: ci, sampling_mode: mode, ..base.clone() }
}
