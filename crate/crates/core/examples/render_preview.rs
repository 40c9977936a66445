use bridge_ddim::bridges::*;
fn main() {
    let cfg = RenderConfig::default();
    for class in BridgeClass::ALL {
        let spec = BridgeSpec { class, spans_m: class.spans_m(), jitter: Jitter::default(), seed: 0 };
        let img = render(&spec, &cfg).unwrap();
        println!("== {class}");
        for row in 0..cfg.height {
            let line: String = (0..cfg.width).map(|c| if img.get(row, c) == 0 { '#' } else { '.' }).collect();
            println!("{line}");
        }
    }
}
