fn main() {
    let dir = concat!(env!("CARGO_MANIFEST_DIR"), "/../../models");
    for f in ["yolov8", "yolov8-p2", "hepan-c2f", "hepan-irdcb", "hierlight", "hepan-c3"] {
        for sc in ["n", "s", "m"] {
            let spec = hierlight::load_model(format!("{dir}/{f}.model"), Some(sc)).unwrap();
            let g = hierlight::graph::compile(&spec, 640).unwrap();
            println!("{f:12} {sc} {:.3}M {:.2}G", g.total_params() as f64 / 1e6, g.total_flops() as f64 / 1e9);
        }
    }
}
