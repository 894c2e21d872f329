//! Retrieval-geometry probe at init (ignored; diagnostic only).

use lmhr::config::RunConfig;
use lmhr::data::synth::{synth_mts, SynthSpec};
use lmhr::model::forward::{build_batch, forward_batch, Phase};
use lmhr::model::{ModelState, TrainContext};
use lmhr::numerics::tape::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
#[ignore]
fn probe_retrieval_at_init() {
    let spec = SynthSpec::lagged_groups(8, 4000, 4);
    let out = synth_mts(&spec, 17).unwrap();
    let lags = out.manifest.lags.clone();
    let mut cfg = RunConfig::default();
    cfg.model.l = 48;
    cfg.model.l_s = 12;
    cfg.model.stride = 2;
    cfg.model.t_f = 12;
    cfg.model.d = 32;
    cfg.model.fusion_hidden = 64;
    cfg.model.backend_width = 16;
    cfg.model.conv_channels = 8;
    cfg.model.conv_kernel = 5;
    cfg.model.pair_hidden = 32;
    cfg.model.dropout = 0.0;
    cfg.retrieval.k_n = 7;
    cfg.retrieval.k_s = 12;
    cfg.seed = 41;
    let ctx = TrainContext::prepare(out.data.clone(), &cfg).unwrap();
    let state = ModelState::init(&cfg, 8, 1).unwrap();
    let windows: Vec<_> = ctx.val_windows.iter().take(3).cloned().collect();
    let batch = build_batch::<f32>(&ctx.data, &windows, &cfg).unwrap();
    let mut tape = Tape::<f32>::new();
    let vars = state.params.load_on_tape(&mut tape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let arts = forward_batch(&mut tape, &vars, &cfg, &batch, Some(&ctx.global_series), Phase::Eval, &mut rng, None).unwrap();
    let plan = arts.retrieval.unwrap();
    let p_segs = (cfg.model.l - cfg.model.l_s) / cfg.model.stride + 2;
    for b in 0..3 {
        for i in [1usize, 3, 5, 7] {
            let mut hits = 0;
            let mut offs = Vec::new();
            for pv in plan.provenance_of(b, i) {
                let mate = if i % 2 == 0 { i + 1 } else { i - 1 };
                if pv.series == mate && lags[pv.series] + 24 <= lags[i] {
                    let expected = (p_segs as i64 - 1) - 24 / cfg.model.stride as i64;
                    let off = pv.segment as i64 - expected;
                    offs.push(off);
                    if off.abs() <= 4 { hits += 1; }
                }
            }
            println!("b{b} node{i} mate-hits {hits}/12 offsets-from-expected {offs:?} sims {:?}",
                &plan.seg_sims_of(b, i)[..4].iter().map(|s| (s*100.0).round()/100.0).collect::<Vec<_>>());
        }
    }
}
