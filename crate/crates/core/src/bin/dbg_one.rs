use factorlab::factorspace::FactorTuple;
use factorlab::synthworld::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let tuple = FactorTuple::parse(&args[1]).unwrap();
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let scene = SceneSpec::sample(seed);
    let img = render_scene(&scene, &tuple, &RenderConfig::default()).unwrap();
    // ascii luminance
    let lum = luminance(&img);
    let ramp = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for y in 0..32 {
        let mut line = String::new();
        for x in 0..32 {
            let v = (lum[[y, x]].clamp(0.0, 1.0) * 9.99) as usize;
            line.push(ramp[v.min(9)]);
        }
        println!("{line}");
    }
    print!("{}", debug_dump(&img));
}
