use factorlab::factorspace::*;
use factorlab::rng::Rng;
use factorlab::synthworld::*;
use rayon::prelude::*;
use std::collections::BTreeMap;

fn main() {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed: u64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(1);
    let reg = default_registry(1);
    let all = enumerate_full_space(&reg);
    let cfg = RenderConfig::default();
    let mut jobs = Vec::new();
    let mut rng = Rng::new(seed);
    for i in 0..n {
        let tuple = all[rng.below(all.len())].clone();
        jobs.push((i as u64 + seed * 1_000_000, tuple));
    }
    let results: Vec<(FactorTuple, OracleReport)> = jobs
        .par_iter()
        .map(|(s, tuple)| {
            let scene = SceneSpec::sample(*s);
            let img = render_scene(&scene, tuple, &cfg).unwrap();
            (tuple.clone(), oracle_classify(&img))
        })
        .collect();
    let mut correct = [0usize; 4];
    let mut confident = [0usize; 4];
    let mut confident_errors = [0usize; 4];
    let mut confusion: BTreeMap<String, usize> = BTreeMap::new();
    let mut example_seed: BTreeMap<String, u64> = BTreeMap::new();
    for ((scene_seed, _), (truth, rep)) in jobs.iter().zip(results.iter()) {
        for cat in Category::ALL {
            let i = cat.index();
            if rep.tuple.value(cat) == truth.value(cat) {
                correct[i] += 1;
            } else {
                if rep.confident[i] {
                    confident_errors[i] += 1;
                }
                let key = format!(
                    "{}: {} -> {} [{}]",
                    cat.name(),
                    truth.value(cat),
                    rep.tuple.value(cat),
                    truth
                );
                example_seed.entry(key.clone()).or_insert(*scene_seed);
                *confusion.entry(key).or_insert(0) += 1;
            }
            if rep.confident[i] {
                confident[i] += 1;
            }
        }
    }
    for cat in Category::ALL {
        let i = cat.index();
        println!(
            "{:9} acc {:.4}  confident {:.3}  acc-on-confident {:.4}",
            cat.name(),
            correct[i] as f64 / n as f64,
            confident[i] as f64 / n as f64,
            1.0 - confident_errors[i] as f64 / confident[i].max(1) as f64
        );
    }
    println!("\ntop confusions:");
    let mut pairs: Vec<_> = confusion.into_iter().collect();
    pairs.sort_by_key(|(_, c)| std::cmp::Reverse(*c));
    for (k, c) in pairs.iter().take(25) {
        println!("  {c:4}  {k}  (seed {})", example_seed[k]);
    }
}
