use bifold_core::fusion::{ContextConfig, ContextMode};
use bifold_core::model::{init_model, sample_input, ArchConfig};
use bifold_core::sim::{generate_dataset, WorldConfig};
use bifold_core::train::{train, step_targets, TrainConfig};
use bifold_core::loss::bce_loss_graph;
use bifold_core::tensor::Graph;
use std::time::Instant;

#[test]
fn probe_timings() {
    bifold_core::tensor::set_nan_guard(false);
    let world = WorldConfig::default();
    let ds = generate_dataset(&world, 8, 17).unwrap();
    for (mode, h) in [(ContextMode::Keyframes, 3), (ContextMode::Consecutive, 3), (ContextMode::None, 0)] {
        let ctx = ContextConfig::new(mode, h).unwrap();
        let model = init_model(ArchConfig::default(), ctx, 0).unwrap();
        let vocab = model.vocab().unwrap();
        let ep = &ds.episodes[0];
        let input = sample_input(&vocab, ep, ep.steps.len()-1, &ctx, 12).unwrap();
        let targets = step_targets(ep, ep.steps.len()-1, 2.0, (32,32)).unwrap();
        // forward only
        let t0 = Instant::now();
        for _ in 0..10 { let _ = model.infer(&input, false).unwrap(); }
        let fwd = t0.elapsed().as_secs_f64()/10.0;
        // forward+backward
        let t0 = Instant::now();
        for _ in 0..10 {
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let pass = model.forward(&mut g, &bound, &input, false).unwrap();
            let loss = bce_loss_graph(&mut g, pass.pick, pass.place, &targets.0, &targets.1).unwrap();
            g.backward(loss).unwrap();
        }
        let fb = t0.elapsed().as_secs_f64()/10.0;
        println!("{mode:?}: fwd {:.1} ms, fwd+bwd {:.1} ms", fwd*1e3, fb*1e3);
    }
    // nan guard cost
    bifold_core::tensor::set_nan_guard(true);
    let ctx = ContextConfig::keyframes(3).unwrap();
    let model = init_model(ArchConfig::default(), ctx, 0).unwrap();
    let vocab = model.vocab().unwrap();
    let ep = &ds.episodes[0];
    let input = sample_input(&vocab, ep, ep.steps.len()-1, &ctx, 12).unwrap();
    let targets = step_targets(ep, ep.steps.len()-1, 2.0, (32,32)).unwrap();
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut g = Graph::new();
        let bound = model.bind(&mut g);
        let pass = model.forward(&mut g, &bound, &input, false).unwrap();
        let loss = bce_loss_graph(&mut g, pass.pick, pass.place, &targets.0, &targets.1).unwrap();
        g.backward(loss).unwrap();
    }
    println!("keyframes fwd+bwd with guard: {:.1} ms", t0.elapsed().as_secs_f64()*100.0);
}

#[test]
fn probe_learning() {
    bifold_core::tensor::set_nan_guard(false);
    let world = WorldConfig { image_size: 16, ..WorldConfig::default() };
    let ds = generate_dataset(&world, 10, 7).unwrap();
    for lr in [3e-3, 1e-2, 3e-2] {
        let ctx = ContextConfig::keyframes(2).unwrap();
        let mut model = init_model(ArchConfig::micro(), ctx, 0).unwrap();
        let cfg = TrainConfig { steps: 200, batch_size: 2, sigma: 1.0, learning_rate: lr, log_every: 25, ..TrainConfig::default() };
        let rep = train(&mut model, &ds, &cfg).unwrap();
        println!("lr {lr}: {:?}", rep.loss_curve.iter().map(|(s,l)| format!("{s}:{l:.4}")).collect::<Vec<_>>());
    }
}
