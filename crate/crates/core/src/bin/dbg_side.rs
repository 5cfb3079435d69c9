use factorlab::factorspace::FactorTuple;
use factorlab::synthworld::*;

fn main() {
    // print side-statistic distributions for true sides vs other views
    for view in ["side", "back", "front", "drone"] {
        for sensor in ["rgb", "thermal", "gated", "event", "rgbthermal"] {
            for lens in ["normal", "fisheye"] {
                for domain in ["real", "simulation", "videogame"] {
                    let t = FactorTuple::new(lens, sensor, view, domain);
                    let mut es = Vec::new();
                    let mut ps = Vec::new();
                    for seed in 0..6u64 {
                        let scene = SceneSpec::sample(seed * 31 + 7);
                        let img = render_scene(&scene, &t, &RenderConfig::default()).unwrap();
                        let d = debug_streaks(&img);
                        // parse "stripe_energy X periodicity Y"
                        let e: f32 = d.split("stripe_energy ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
                        let p: f32 = d.split("periodicity ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
                        es.push(e);
                        ps.push(p);
                    }
                    let emin = es.iter().cloned().fold(f32::MAX, f32::min);
                    let emax = es.iter().cloned().fold(0.0f32, f32::max);
                    let pmin = ps.iter().cloned().fold(f32::MAX, f32::min);
                    let pmax = ps.iter().cloned().fold(0.0f32, f32::max);
                    println!("{view:6} {sensor:10} {lens:7} {domain:10}  energy [{emin:.3},{emax:.3}] period [{pmin:.3},{pmax:.3}]");
                }
            }
        }
    }
}
