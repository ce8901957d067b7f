use bifold_core::encoders::TokenOrigin;
use bifold_core::fusion::ContextConfig;
use bifold_core::model::{init_model, sample_input, ArchConfig};
use bifold_core::params::Fwd;
use bifold_core::sim::{generate_dataset, WorldConfig};
use bifold_core::tensor::Graph;
use std::time::Instant;

#[test]
fn probe_stage_times() {
    bifold_core::tensor::set_nan_guard(false);
    let world = WorldConfig::default();
    let ds = generate_dataset(&world, 4, 17).unwrap();
    let ctx = ContextConfig::keyframes(3).unwrap();
    let model = init_model(ArchConfig::default(), ctx, 0).unwrap();
    let vocab = model.vocab().unwrap();
    let ep = &ds.episodes[0];
    let input = sample_input(&vocab, ep, ep.steps.len()-1, &ctx, 12).unwrap();

    let reps = 20;
    let mut t_bind = 0.0; let mut t_text = 0.0; let mut t_img = 0.0;
    let mut t_asm = 0.0; let mut t_fuse = 0.0; let mut t_dec = 0.0;
    for _ in 0..reps {
        let mut g = Graph::new();
        let t0 = Instant::now();
        let bound = model.bind(&mut g);
        t_bind += t0.elapsed().as_secs_f64();
        let mut f = Fwd::new(&mut g, &bound);
        let t0 = Instant::now();
        let text = model.text_encoder.encode(&mut f, &input.instruction).unwrap();
        t_text += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let current = model.image_encoder.encode(&mut f, &input.current, TokenOrigin::CurrentObs).unwrap();
        let mut ctx_seqs = Vec::new();
        for (i, obs) in input.context.iter().enumerate() {
            ctx_seqs.push(model.image_encoder.encode(&mut f, obs, TokenOrigin::ContextObs(i)).unwrap());
        }
        t_img += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let asm = model.fusion.assemble(&mut f, &text, &current, &ctx_seqs).unwrap();
        t_asm += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let fused = model.fusion.fuse(&mut f, asm, false).unwrap();
        t_fuse += t0.elapsed().as_secs_f64();
        let t0 = Instant::now();
        let tokens = bifold_core::fusion::extract_current(&mut f, &fused).unwrap();
        let _ = model.decoder.decode(&mut f, tokens, fused.current_grid).unwrap();
        t_dec += t0.elapsed().as_secs_f64();
    }
    let ms = |t: f64| t / reps as f64 * 1e3;
    println!("bind {:.1} text {:.1} img(4) {:.1} asm {:.1} fuse {:.1} dec {:.1} ms",
        ms(t_bind), ms(t_text), ms(t_img), ms(t_asm), ms(t_fuse), ms(t_dec));
}
