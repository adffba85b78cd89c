// scratch probe
#[test]
fn probe_init_spread() {
    use lum_core::pipeline::*;
    let overrides = vec![
        "run_dir=\"/tmp/acc8/run\"".to_string(),
        "data.users=1000".into(), "data.catalog=50".into(), "data.days=8".into(),
        "tokenizer.embed_dim=16".into(), "tokenizer.branching=[5,5]".into(),
        "walks.dims=8".into(), "walks.walks_per_node=5".into(), "walks.walk_length=20".into(), "walks.epochs=2".into(),
        "qformer.num_queries=2".into(), "qformer.dim=16".into(), "qformer.layers=1".into(),
        "qformer.heads=2".into(), "qformer.text_dim=8".into(),
        "decoder.layers=2".into(), "decoder.dim=16".into(), "decoder.heads=2".into(), "decoder.max_len=32".into(), "decoder.trainable=true".into(),
    ];
    let cfg = load_config(None, &overrides).unwrap();
    let art = load_artifacts(&cfg).unwrap();
    let model = Model::build(&cfg, &art).unwrap();
    let fused = model.fuse_catalog_const().unwrap();
    let mean: Vec<f64> = (0..16).map(|k| fused.iter().map(|f| f.data()[k]).sum::<f64>()/50.0).collect();
    let mnorm = mean.iter().map(|x| x*x).sum::<f64>().sqrt();
    let spread: f64 = fused.iter().map(|f| {
        f.data().iter().zip(&mean).map(|(x,m)| (x-m)*(x-m)).sum::<f64>()
    }).sum::<f64>()/50.0;
    println!("mean norm {:.3}, rms spread {:.3}, ratio {:.3}", mnorm, spread.sqrt(), spread.sqrt()/mnorm);
    // distinctness: min pairwise distance
    let mut mind = f64::MAX;
    for i in 0..50 { for j in 0..i {
        let d: f64 = fused[i].data().iter().zip(fused[j].data()).map(|(x,y)| (x-y)*(x-y)).sum::<f64>().sqrt();
        if d < mind { mind = d; }
    }}
    println!("min pairwise dist {:.4}", mind);
}
