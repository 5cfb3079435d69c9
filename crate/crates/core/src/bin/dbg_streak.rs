use factorlab::factorspace::FactorTuple;
use factorlab::synthworld::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let tuple = FactorTuple::parse(&args[1]).unwrap();
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let scene = SceneSpec::sample(seed);
    let img = render_scene(&scene, &tuple, &RenderConfig::default()).unwrap();
    print!("{}", debug_streaks(&img));
}
