use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tmc_core::cross::{
    align_loss_from_similarity, ma_loss_total, mhca, AlignMode, McmStage,
};
use tmc_core::data::prompt_vocabulary;
use tmc_core::nn::{Linear, MultiHead};
use tmc_core::params::{Init, ParamStore, Session};
use tmc_core::seg::{ForwardEvent, ForwardFlags, ModelConfig, TmcModel};
use tmc_core::text::{tokenize, TextConfig, TextEncoder, PAD, TEXT_LEN};
use tmc_core::visual::{EncoderConfig, VisualEncoder, STAGES};
use tmc_tensor::gradcheck::{grad_check, probe};
use tmc_tensor::{Graph, Tensor, Var};

const LN2: f64 = std::f64::consts::LN_2;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn text_encoder(seed: u64) -> (TextEncoder, ParamStore) {
    let vocab = prompt_vocabulary();
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let cfg = TextConfig {
        vocab_size: vocab.len(),
        d_text: 32,
        d: 16,
        heads: 2,
        blocks: 2,
        stages: vec![2, 3, 4],
    };
    let enc = TextEncoder::new(&mut Init { store: &mut store, rng: &mut r }, &cfg).unwrap();
    (enc, store)
}

fn encode(enc: &TextEncoder, store: &ParamStore, prompt: &str) -> Tensor {
    let tokens = tokenize(prompt, &prompt_vocabulary()).unwrap();
    let mut s = Session::new(store, false);
    let l = enc.encode(&mut s, &tokens).unwrap();
    s.g.value(l).clone()
}

// ---- text -----------------------------------------------------------------

#[test]
fn text_features_have_fixed_length_and_are_deterministic() {
    let (enc, store) = text_encoder(0);
    let a = encode(&enc, &store, "one target region, upper left");
    let b = encode(&enc, &store, "one target region, upper left");
    assert_eq!(a.shape(), &[TEXT_LEN, 32]);
    assert_eq!(a, b);
}

#[test]
fn pad_embedding_never_reaches_real_tokens() {
    let (enc, mut store) = text_encoder(1);
    let prompt = "two target regions, upper left and lower right";
    let real = tokenize(prompt, &prompt_vocabulary()).unwrap().mask.iter().filter(|&&m| m).count();
    let before = encode(&enc, &store, prompt);
    let mut r = rng(99);
    let table = store.get_mut(enc.embed);
    let d = table.shape()[1];
    for v in &mut table.data_mut()[PAD * d..(PAD + 1) * d] {
        *v += r.gen_range(-5.0..5.0);
    }
    let after = encode(&enc, &store, prompt);
    let n = real * 32;
    let diff = before.data()[..n]
        .iter()
        .zip(&after.data()[..n])
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-9, "{diff}");
}

#[test]
fn cls_is_row_zero_and_stage_projections_are_independent() {
    let (enc, mut store) = text_encoder(2);
    let tokens = tokenize("one target region, lower left", &prompt_vocabulary()).unwrap();
    let stage_feats = |store: &ParamStore| {
        let mut s = Session::new(store, false);
        let l = enc.encode(&mut s, &tokens).unwrap();
        [2, 3, 4]
            .map(|i| {
                let st = enc.project_stage(&mut s, l, i).unwrap();
                let li = s.g.value(st.l_i).clone();
                assert_eq!(s.g.value(st.cls).data(), &li.data()[..li.shape()[1]]);
                li
            })
    };
    let before = stage_feats(&store);
    let w2 = enc.proj[&2].w;
    let shape = store.get(w2).shape().to_vec();
    *store.get_mut(w2) = Tensor::zeros(&shape);
    let after = stage_feats(&store);
    assert_ne!(before[0], after[0]);
    assert_eq!(before[1], after[1]);
    assert_eq!(before[2], after[2]);
    let mut s = Session::new(&store, false);
    let l = enc.encode(&mut s, &tokens).unwrap();
    assert!(enc.project_stage(&mut s, l, 1).is_err());
}

#[test]
fn identity_projection_truncates_text_features() {
    let (enc, mut store) = text_encoder(3);
    let p = &enc.proj[&3];
    *store.get_mut(p.w) = Tensor::from_fn(&[32, 16], |k| if k / 16 == k % 16 { 1.0 } else { 0.0 });
    let tokens = tokenize("one target region, upper right", &prompt_vocabulary()).unwrap();
    let mut s = Session::new(&store, false);
    let l = enc.encode(&mut s, &tokens).unwrap();
    let st = enc.project_stage(&mut s, l, 3).unwrap();
    let (l, li) = (s.g.value(l), s.g.value(st.l_i));
    for t in 0..TEXT_LEN {
        assert_eq!(&li.data()[t * 16..(t + 1) * 16], &l.data()[t * 32..t * 32 + 16]);
    }
}

#[test]
fn stage_projection_gradients() {
    let mut r = rng(4);
    let inputs = [
        Tensor::uniform(&[TEXT_LEN, 6], -1.0, 1.0, &mut r),
        Tensor::uniform(&[6, 4], -1.0, 1.0, &mut r),
        Tensor::uniform(&[4], -1.0, 1.0, &mut r),
    ];
    let rep = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            probe(g, y)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

// ---- visual ---------------------------------------------------------------

fn encoder(size: usize, c1: usize) -> (VisualEncoder, ParamStore) {
    let mut store = ParamStore::new();
    let cfg = EncoderConfig {
        height: size,
        width: size,
        in_channels: 1,
        patch: 4,
        base_channels: c1,
        heads: 2,
    };
    let enc = VisualEncoder::new(&mut Init { store: &mut store, rng: &mut rng(5) }, &cfg).unwrap();
    (enc, store)
}

#[test]
fn encoder_schedule_doubles_channels_and_quarters_tokens() {
    for (size, c1) in [(32, 8), (64, 8), (32, 16), (96, 16)] {
        let (enc, store) = encoder(size, c1);
        let mut s = Session::new(&store, false);
        s.attention_trace = Some(Vec::new());
        let img = s.g.constant(Tensor::uniform(&[1, size, size], 0.0, 1.0, &mut rng(6)));
        let mut v = enc.patch_embed(&mut s, img).unwrap();
        let n1 = (size / 4) * (size / 4);
        assert_eq!(s.g.shape(v.tokens), &[n1, c1]);
        for i in 2..=STAGES {
            v = enc.encode_stage(&mut s, v).unwrap();
            assert_eq!(v.stage, i);
            assert_eq!(v.c, c1 << (i - 1));
            assert_eq!(s.g.shape(v.tokens), &[n1 >> (2 * (i - 1)), c1 << (i - 1)]);
        }
        for a in s.attention_trace.take().unwrap() {
            let c = a.shape()[1];
            for row in a.data().chunks(c) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn constant_image_gives_identical_tokens_without_position_embedding() {
    let (enc, mut store) = encoder(32, 8);
    let shape = store.get(enc.pos).shape().to_vec();
    *store.get_mut(enc.pos) = Tensor::zeros(&shape);
    let mut s = Session::new(&store, false);
    let img = s.g.constant(Tensor::filled(&[1, 32, 32], 0.4));
    let v = enc.patch_embed(&mut s, img).unwrap();
    let t = s.g.value(v.tokens);
    assert_eq!(t.shape(), &[64, 8]);
    for row in t.data().chunks(8) {
        assert_eq!(row, &t.data()[..8]);
    }
    let bad = s.g.constant(Tensor::zeros(&[1, 16, 32]));
    assert!(enc.patch_embed(&mut s, bad).is_err());
}

#[test]
fn merge_step_on_four_by_four_grid() {
    let (enc, store) = encoder(32, 8);
    let mut s = Session::new(&store, false);
    let img = s.g.constant(Tensor::uniform(&[1, 32, 32], 0.0, 1.0, &mut rng(7)));
    let v = enc.patch_embed(&mut s, img).unwrap();
    let v2 = enc.encode_stage(&mut s, v).unwrap();
    assert_eq!((v2.h, v2.w, v2.c), (4, 4, 16));
    let v3 = enc.encode_stage(&mut s, v2).unwrap();
    assert_eq!((v3.h, v3.w, v3.c), (2, 2, 32));
    assert_eq!(s.g.shape(v3.tokens), &[4, 32]);
}

#[test]
fn encoder_rejects_indivisible_images() {
    let cfg = EncoderConfig {
        height: 40,
        width: 40,
        in_channels: 1,
        patch: 4,
        base_channels: 8,
        heads: 2,
    };
    assert!(cfg.validate().is_err());
}

// ---- cross-attention ------------------------------------------------------

fn attention(d: usize, heads: usize, seed: u64) -> (MultiHead, ParamStore) {
    let mut store = ParamStore::new();
    let m = MultiHead::new(&mut Init { store: &mut store, rng: &mut rng(seed) }, "a", d, heads).unwrap();
    (m, store)
}

#[test]
fn single_key_attention_passes_values_through() {
    let (m, store) = attention(4, 2, 8);
    let mut s = Session::new(&store, false);
    let mut r = rng(9);
    let q = s.g.constant(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r));
    let kv = Tensor::uniform(&[1, 4], -1.0, 1.0, &mut r);
    let k = s.g.constant(kv.clone());
    let out = mhca(&mut s, &m, q, k, k, None).unwrap();
    for p in &out.probs {
        assert!(s.g.value(*p).data().iter().all(|&w| w == 1.0));
    }
    let (wv, wo) = (store.get(m.wv.w), store.get(m.wo.w));
    let mut want = [0.0; 4];
    for (j, w) in want.iter_mut().enumerate() {
        for a in 0..4 {
            let vw: f64 = (0..4).map(|b| kv.data()[b] * wv.data()[b * 4 + a]).sum();
            *w += vw * wo.data()[a * 4 + j];
        }
    }
    for row in s.g.value(out.out).data().chunks(4) {
        for (x, y) in row.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn masking_all_but_one_key_matches_single_key() {
    let (m, store) = attention(4, 2, 10);
    let mut r = rng(11);
    let qv = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
    let kv = Tensor::uniform(&[5, 4], -1.0, 1.0, &mut r);
    let mut s = Session::new(&store, false);
    let q = s.g.constant(qv.clone());
    let k = s.g.constant(kv.clone());
    let keep = [false, false, true, false, false];
    let masked = mhca(&mut s, &m, q, k, k, Some(&keep)).unwrap();
    let one = s.g.constant(Tensor::new(&[1, 4], kv.data()[8..12].to_vec()).unwrap());
    let single = mhca(&mut s, &m, q, one, one, None).unwrap();
    let (a, b) = (s.g.value(masked.out), s.g.value(single.out));
    assert!(a.max_abs_diff(b) < 1e-12);
}

#[test]
fn attention_gradients_over_all_projections() {
    let (m, store) = attention(4, 2, 12);
    let mut r = rng(13);
    let mut inputs: Vec<Tensor> = store.iter().map(|(_, _, t)| t.clone()).collect();
    inputs.push(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r));
    inputs.push(Tensor::uniform(&[2, 4], -1.0, 1.0, &mut r));
    let rep = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let mut s = Session::adopt(std::mem::take(g), &store, &v[..4]);
            let out = mhca(&mut s, &m, v[4], v[5], v[5], None).map(|a| a.out);
            *g = s.into_graph();
            probe(g, out.expect("valid shapes"))
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

fn mcm(seed: u64) -> (McmStage, ParamStore) {
    let mut store = ParamStore::new();
    let st = McmStage::new(&mut Init { store: &mut store, rng: &mut rng(seed) }, "m", 8, 8, 2).unwrap();
    (st, store)
}

#[test]
fn singleton_fusion_has_unit_attention() {
    let (st, store) = mcm(14);
    let mut s = Session::new(&store, false);
    let mut r = rng(15);
    let v = s.g.constant(Tensor::uniform(&[1, 8], -1.0, 1.0, &mut r));
    let l = s.g.constant(Tensor::uniform(&[1, 8], -1.0, 1.0, &mut r));
    let f = st.fuse(&mut s, v, l, &[true]).unwrap();
    assert_eq!(f.attn_vl.data(), &[1.0]);
    assert_eq!(s.g.shape(f.f_v), &[1, 8]);
    assert_eq!(s.g.shape(f.f_l), &[1, 8]);
}

#[test]
fn language_is_refined_from_updated_visual_tokens() {
    let (st, store) = mcm(16);
    let mut r = rng(17);
    let vt = Tensor::uniform(&[4, 8], -1.0, 1.0, &mut r);
    let lt = Tensor::uniform(&[3, 8], -1.0, 1.0, &mut r);
    let run = |vt: &Tensor| {
        let mut s = Session::new(&store, false);
        let v = s.g.constant(vt.clone());
        let l = s.g.constant(lt.clone());
        let f = st.fuse(&mut s, v, l, &[true; 3]).unwrap();
        s.g.value(f.f_l).clone()
    };
    let mut v2 = vt.clone();
    v2.data_mut()[5] += 0.5;
    assert!(run(&vt).max_abs_diff(&run(&v2)) > 1e-6);
}

#[test]
fn zero_output_projections_make_fusion_text_blind() {
    let (st, mut store) = mcm(18);
    for w in [st.attn_v.wo.w, st.attn_l.wo.w] {
        *store.get_mut(w) = Tensor::zeros(&[8, 8]);
    }
    let mut r = rng(19);
    let vt = Tensor::uniform(&[4, 8], -1.0, 1.0, &mut r);
    let run = |lt: Tensor| {
        let mut s = Session::new(&store, false);
        let v = s.g.constant(vt.clone());
        let l = s.g.constant(lt);
        let f = st.fuse(&mut s, v, l, &[true; 3]).unwrap();
        let got = s.g.value(f.f_v).clone();
        let h = st.norm_v.forward(&mut s, v).unwrap();
        let h = st.ffn_v.forward(&mut s, h).unwrap();
        let want = s.g.add(v, h).unwrap();
        (got, s.g.value(want).clone())
    };
    let (a, want) = run(Tensor::uniform(&[3, 8], -1.0, 1.0, &mut r));
    let (b, _) = run(Tensor::uniform(&[3, 8], -1.0, 1.0, &mut r));
    assert_eq!(a, b);
    assert!(a.max_abs_diff(&want) < 1e-12);
}

fn loss_at(sim: f64, mode: AlignMode) -> (f64, f64) {
    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let x = s.g.param(Tensor::scalar(sim));
    let l = align_loss_from_similarity(&mut s, x, mode);
    s.g.backward(l).unwrap();
    (s.g.value(l).item(), s.g.grad(x).unwrap().item())
}

#[test]
fn alignment_loss_closed_forms() {
    let (l0, g0) = loss_at(0.0, AlignMode::TwoSided);
    assert!((l0 - 2.0 * LN2).abs() < 1e-12);
    assert_eq!(g0, 0.0);
    let (l1, _) = loss_at(1.0, AlignMode::TwoSided);
    let want = -sigmoid(1.0).ln() - (1.0 - sigmoid(1.0)).ln();
    assert!((l1 - want).abs() < 1e-12);
    assert!((l1 - 1.6265).abs() < 1e-4);
    let (la, _) = loss_at(1.0, AlignMode::Attract);
    assert!((la + sigmoid(1.0).ln()).abs() < 1e-12);
}

#[test]
fn stage_mean_of_alignment_terms() {
    let store = ParamStore::new();
    let mut s = Session::new(&store, false);
    let xs: Vec<Var> = [1.0, 2.0, 3.0].iter().map(|&v| s.g.constant(Tensor::scalar(v))).collect();
    let m = ma_loss_total(&mut s, &xs).unwrap();
    assert_eq!(s.g.value(m).item(), 2.0);
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let m2 = ma_loss_total(&mut s, &rev).unwrap();
    assert_eq!(s.g.value(m2).item(), 2.0);
    let one = ma_loss_total(&mut s, &xs[1..2]).unwrap();
    assert_eq!(s.g.value(one).item(), 2.0);
    assert!(ma_loss_total(&mut s, &[]).is_err());
}

proptest! {
    #[test]
    fn alignment_slope_is_two_sigmoid_minus_one(sim in -20.0f64..20.0) {
        let (l, g) = loss_at(sim, AlignMode::TwoSided);
        prop_assert!((g - (2.0 * sigmoid(sim) - 1.0)).abs() < 1e-12);
        prop_assert!(l >= 2.0 * LN2 - 1e-12);
        prop_assert_eq!(g.partial_cmp(&0.0), sim.partial_cmp(&0.0));
    }

    #[test]
    fn cross_attention_rows_are_distributions(seed in any::<u64>(), a in 1usize..6, b in 1usize..8) {
        let (m, store) = attention(4, 2, seed);
        let mut r = rng(seed ^ 1);
        let mut s = Session::new(&store, false);
        let q = s.g.constant(Tensor::uniform(&[a, 4], -3.0, 3.0, &mut r));
        let k = s.g.constant(Tensor::uniform(&[b, 4], -3.0, 3.0, &mut r));
        let out = mhca(&mut s, &m, q, k, k, None).unwrap();
        for p in &out.probs {
            for row in s.g.value(*p).data().chunks(b) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

// ---- full network ---------------------------------------------------------

fn model(cfg: &ModelConfig, seed: u64) -> (TmcModel, ParamStore) {
    TmcModel::new(cfg, &mut rng(seed)).unwrap()
}

fn image(size: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[1, size, size], 0.0, 1.0, &mut rng(seed))
}

fn prob(m: &TmcModel, store: &ParamStore, img: &Tensor, prompt: &str, flags: ForwardFlags) -> Tensor {
    let tokens = tokenize(prompt, &prompt_vocabulary()).unwrap();
    let mut s = Session::new(store, false);
    let out = m.forward(&mut s, img, &tokens, flags).unwrap();
    s.g.value(out.prob).clone()
}

#[test]
fn forward_shape_law_across_configs() {
    let v = prompt_vocabulary().len();
    for size in [32, 64, 128, 224] {
        for c1 in [8, 16] {
            for stages in [vec![2, 3, 4], vec![3], vec![]] {
                let cfg = ModelConfig {
                    image_size: size,
                    base_channels: c1,
                    stages: stages.clone(),
                    ..ModelConfig::toy(v)
                };
                if size == 224 && stages.len() != 3 {
                    continue;
                }
                let (m, store) = model(&cfg, 20);
                let tokens = tokenize("one target region, upper left", &prompt_vocabulary()).unwrap();
                let mut s = Session::new(&store, false);
                let flags = ForwardFlags {
                    fusion: !stages.is_empty(),
                    align: (!stages.is_empty()).then_some(AlignMode::TwoSided),
                };
                let out = m.forward(&mut s, &image(size, 21), &tokens, flags).unwrap();
                assert_eq!(s.g.shape(out.prob), &[1, size, size]);
                let p = s.g.value(out.prob);
                assert!(p.data().iter().all(|&x| x > 0.0 && x < 1.0));
                let mut prev: Option<(usize, usize)> = None;
                for c in &out.cache {
                    let (n, ch) = (c.v_pre.shape()[0], c.v_pre.shape()[1]);
                    let grid = (size / 4) >> (c.stage - 1);
                    assert_eq!((n, ch), (grid * grid, c1 << (c.stage - 1)));
                    if let Some((pn, pc)) = prev {
                        assert!(n * 4 <= pn && ch >= 2 * pc);
                    }
                    prev = Some((n, ch));
                    assert_eq!(c.f_v.shape(), &[n, cfg.d]);
                }
                assert_eq!(out.cache.len(), stages.len());
            }
        }
    }
}

#[test]
fn alignment_reads_features_before_fusion_at_each_stage() {
    let cfg = ModelConfig::toy(prompt_vocabulary().len());
    let (m, store) = model(&cfg, 22);
    let tokens = tokenize("one target region, lower right", &prompt_vocabulary()).unwrap();
    let mut s = Session::new(&store, false);
    let out = m.forward(&mut s, &image(32, 23), &tokens, ForwardFlags::default()).unwrap();
    let mut want = Vec::new();
    for i in [2, 3, 4] {
        want.extend([ForwardEvent::Capture(i), ForwardEvent::Align(i), ForwardEvent::Fuse(i)]);
    }
    assert_eq!(out.events, want);
    assert_eq!(out.align.iter().map(|(i, _)| *i).collect::<Vec<_>>(), [2, 3, 4]);
}

#[test]
fn attention_maps_in_a_full_forward_are_distributions() {
    let cfg = ModelConfig::toy(prompt_vocabulary().len());
    let (m, store) = model(&cfg, 24);
    let tokens = tokenize("two target regions, upper left and lower left", &prompt_vocabulary()).unwrap();
    for seed in 0..100 {
        let mut s = Session::new(&store, false);
        s.attention_trace = Some(Vec::new());
        let out = m.forward(&mut s, &image(32, seed), &tokens, ForwardFlags::default()).unwrap();
        let trace = s.attention_trace.take().unwrap();
        assert!(trace.len() > 10);
        for a in trace.iter().chain(out.cache.iter().filter_map(|c| c.attn_vl.as_ref())) {
            let c = a.shape()[1];
            for row in a.data().chunks(c) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let p = s.g.value(out.prob);
        assert!(p.data().iter().all(|&x| x > 0.0 && x < 1.0));
    }
}

#[test]
fn prompt_reaches_every_fused_stage() {
    let cfg = ModelConfig::toy(prompt_vocabulary().len());
    let (m, store) = model(&cfg, 25);
    let img = image(32, 26);
    let run = |prompt: &str| {
        let tokens = tokenize(prompt, &prompt_vocabulary()).unwrap();
        let mut s = Session::new(&store, false);
        let out = m.forward(&mut s, &img, &tokens, ForwardFlags::default()).unwrap();
        (out.cache, s.g.value(out.prob).clone())
    };
    let (a, pa) = run("one target region, upper left");
    let (b, pb) = run("one target region, lower right");
    for (x, y) in a.iter().zip(&b) {
        assert!(x.f_v.max_abs_diff(&y.f_v) > 1e-9, "stage {}", x.stage);
    }
    assert!(pa.max_abs_diff(&pb) > 0.0);
}

#[test]
fn gradients_reach_text_fusion_and_both_down_paths() {
    let cfg = ModelConfig::tiny(prompt_vocabulary().len());
    let (m, store) = model(&cfg, 27);
    let tokens = tokenize("one target region, upper left", &prompt_vocabulary()).unwrap();
    let mut s = Session::new(&store, true);
    let out = m.forward(&mut s, &image(16, 28), &tokens, ForwardFlags::default()).unwrap();
    let l = s.g.sum(out.prob);
    s.g.backward(l).unwrap();
    let grads = s.param_grads();
    for prefix in ["text.", "vis.", "mcm2.", "cnn.down1", "vit.down1", "up1.", "bottleneck", "head"] {
        let nonzero = grads
            .iter()
            .filter(|(id, _)| store.name(*id).starts_with(prefix))
            .any(|(_, g)| g.data().iter().any(|&x| x != 0.0));
        assert!(nonzero, "no gradient reaches {prefix}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10))]

    #[test]
    fn text_ablation_makes_output_prompt_independent(seed in any::<u64>()) {
        let cfg = ModelConfig::tiny(prompt_vocabulary().len());
        let (m, store) = model(&cfg, 29);
        let img = image(16, 30);
        let flags = ForwardFlags { fusion: false, align: None };
        let base = prob(&m, &store, &img, "one target region, upper left", flags);
        let words = ["one", "two", "target", "region", "upper", "lower", "left", "right", "and", "zebra"];
        let mut r = rng(seed);
        let n = r.gen_range(1..12);
        let prompt: Vec<&str> = (0..n).map(|_| words[r.gen_range(0..words.len())]).collect();
        let other = prob(&m, &store, &img, &prompt.join(" "), flags);
        prop_assert_eq!(base, other);
    }
}

#[test]
fn model_config_rejects_bad_stage_sets() {
    let v = prompt_vocabulary().len();
    for stages in [vec![1], vec![3, 2], vec![5], vec![2, 2]] {
        let cfg = ModelConfig { stages, ..ModelConfig::toy(v) };
        assert!(cfg.validate().is_err());
    }
    let lin = Linear::new(&mut Init { store: &mut ParamStore::new(), rng: &mut rng(0) }, "x", 2, 3, true);
    assert_eq!((lin.d_in, lin.d_out), (2, 3));
}
