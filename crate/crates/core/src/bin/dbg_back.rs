use factorlab::factorspace::FactorTuple;
use factorlab::synthworld::*;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let tuple = FactorTuple::parse(&args[1]).unwrap();
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);
    let scene = SceneSpec::sample(seed);
    let img = render_scene(&scene, &tuple, &RenderConfig::default()).unwrap();
    let (_, gy) = sobel_luminance(&img);
    let (_, h, w) = img.dim();
    let cx0 = (0.28 * w as f32) as usize;
    let cx1 = (0.72 * w as f32) as usize;
    for y in (0.55 * h as f32) as usize..h {
        let covered = (cx0..cx1).filter(|&x| gy[[y, x]].abs() > 0.13).count();
        println!("row {y}: coverage {:.2}", covered as f32 / (cx1 - cx0) as f32);
    }
}
