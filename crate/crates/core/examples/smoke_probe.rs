// temporary probe: ablation matrix on one category
use tad_core::data::synth::{generate_synthetic, DefectKind, SynthSpec};
use tad_core::pipeline::ablation::{cmd_ablate, VariantId};
use tad_core::pipeline::RunConfig;

fn main() {
    let category = std::env::args().nth(1).unwrap_or_else(|| "stripes".into());
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        category: category.parse().unwrap(),
        image_size: 64,
        n_train: 60,
        n_test_normal: 10,
        n_test_anomalous: 10,
        defects: DefectKind::ALL.to_vec(),
        seed: 7,
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    let cfg: RunConfig = serde_json::from_str(&std::fs::read_to_string("configs/desk.json").unwrap()).unwrap();
    let mut sink = std::io::sink();
    let t0 = std::time::Instant::now();
    let table = cmd_ablate(&cfg, &dir.path().join(&category), &dir.path().join("ab"), &VariantId::ALL, &mut sink).unwrap();
    for row in &table.rows {
        println!("{:>5}  image {:.4}  pixel {:.4}", row.variant, row.image_auc, row.pixel_auc);
    }
    println!("wall: {:.0}s", t0.elapsed().as_secs_f64());
}
