use std::rc::Rc;

use avsep_core::audio_encoder::AudioEncoder;
use avsep_core::dsp::{Stft, StftConfig};
use avsep_core::gradcheck::check_params;
use avsep_core::model::{ModelConfig, SeparationNet};
use avsep_core::mst::*;
use avsep_core::semantics::*;
use avsep_core::sp_fusion::*;
use avsep_core::tensor::{Graph, Init, ParamStore, Var};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    ArrayD::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn build<T>(seed: u64, f: impl FnOnce(&mut Init<'_, f64>) -> T) -> (ParamStore<f64>, T) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut Init::new(&mut store, &mut rng));
    (store, m)
}

fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let w = rand_arr(g.shape(y), seed);
    g.dot_const(y, &w)
}

fn random_mouths(n: usize, seed: u64) -> MouthFrames {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MouthFrames::new(Array3::from_shape_fn((n, 88, 88), |_| rng.gen::<u8>())).unwrap()
}

#[test]
fn mouth_frames_validation() {
    assert!(MouthFrames::new(Array3::zeros((5, 88, 87))).is_err());
    assert!(MouthFrames::new(Array3::zeros((0, 88, 88))).is_err());
    assert_eq!(frames_for_samples(32000, 16000), 50);
}

#[test]
fn vsr_shapes_and_constant_output_on_zero_frames() {
    let cfg = VsrConfig {
        channels: [2, 3, 4],
        ..Default::default()
    };
    let (store, vsr) = build(1, |i| VsrEncoder::new(&mut i.sub("vsr"), &cfg, 64).unwrap());
    let out = vsr.encode(&store, &random_mouths(50, 2));
    assert_eq!(out.features.dim(), (50, 64));
    assert_eq!(out.source, StreamSource::VideoOnly);
    let z = vsr.encode(&store, &MouthFrames::zeros(50));
    assert!(z.features.iter().all(|v| v.is_finite()));
    // zero frames give identical per-frame features before the temporal stack;
    // the dilated temporal convolutions only see zero padding at the edges
    for t in 8..42 {
        for c in 0..64 {
            assert!((z.features[[t, c]] - z.features[[20, c]]).abs() < 1e-12);
        }
    }
    assert_eq!(vsr.encode(&store, &random_mouths(50, 2)), out);
}

#[test]
fn vsr_spatial_trace() {
    let cfg = VsrConfig {
        channels: [2, 2, 2],
        ..Default::default()
    };
    let (store, _) = build(1, |i| VsrEncoder::new(&mut i.sub("vsr"), &cfg, 4).unwrap());
    // the pooling chain 88 -> 44 -> 22 -> 11
    let mut g = Graph::<f64>::inference();
    let mut x = g.input(random_mouths(2, 3).to_input());
    for b in 0..3 {
        let w = g.param(&store, store.id(&format!("vsr.block{b}.conv1.weight")).unwrap());
        x = g.conv2d(x, w, None, (1, 1));
        x = g.max_pool2(x);
    }
    assert_eq!(g.shape(x), &[2, 2, 11, 11]);
}

#[test]
fn asr_shapes_and_level_sensitivity() {
    let cfg = StftConfig::default();
    let plan = Stft::<f64>::new(&cfg).unwrap();
    let (store, asr) = build(4, |i| AsrEncoder::new(&mut i.sub("asr"), &AsrConfig::default(), 257, 64).unwrap());
    let x = rand_arr(&[32000], 5).into_raw_vec_and_offset().0;
    let out = asr.encode(&store, &x, 16000, &plan, 50).unwrap();
    assert_eq!(out.features.dim(), (50, 64));
    let loud: Vec<f64> = x.iter().map(|v| v * 10.0).collect();
    assert_ne!(asr.encode(&store, &loud, 16000, &plan, 50).unwrap().features, out.features);
    assert!(asr.encode(&store, &x, 16000, &plan, 49).is_err());
    let zero = asr.encode(&store, &vec![0.0; 32000], 16000, &plan, 50).unwrap();
    assert!(zero.features.iter().all(|v| v.is_finite()));
}

#[test]
fn adaptive_pool_rows_are_averages() {
    let m = adaptive_pool_matrix::<f64>(251, 50);
    for row in m.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    let m = adaptive_pool_matrix::<f64>(10, 10);
    assert_eq!(m, Array2::eye(10));
}

#[test]
fn av_fusion_contract() {
    let (store, av) = build(6, |i| AvFusion::new(&mut i.sub("av"), 8));
    let v = SemanticStream {
        features: rand_arr(&[50, 8], 7).into_dimensionality().unwrap(),
        source: StreamSource::VideoOnly,
    };
    let a = SemanticStream {
        features: rand_arr(&[50, 8], 8).into_dimensionality().unwrap(),
        source: StreamSource::AudioVisual,
    };
    let out = av.fuse(&store, &v, &a).unwrap();
    assert_eq!(out.features.dim(), (50, 8));
    assert_eq!(out.source, StreamSource::AudioVisual);
    assert_ne!(out.features, v.features);
    let z = SemanticStream::zeros(50, 8, StreamSource::AudioVisual);
    assert_eq!(av.fuse(&store, &v, &z).unwrap(), av.fuse(&store, &v, &z).unwrap());
    let short = SemanticStream::zeros(49, 8, StreamSource::AudioVisual);
    assert!(av.fuse(&store, &v, &short).is_err());
    let mut store = store;
    av.zero_output(&mut store);
    assert_eq!(av.fuse(&store, &v, &a).unwrap().features, v.features);
}

#[test]
fn occlusion_contract() {
    let m = random_mouths(50, 9);
    assert_eq!(occlude(&m, 0, 1).unwrap(), m);
    assert!(occlude(&m, 50, 1).unwrap().frames.iter().all(|&p| p == 0));
    assert!(occlude(&m, 51, 1).is_err());
    let o = occlude(&m, 10, 42).unwrap();
    let zero: Vec<usize> = (0..50).filter(|&t| o.frames.index_axis(ndarray::Axis(0), t).iter().all(|&p| p == 0)).collect();
    assert_eq!(zero.len(), 10);
    assert_eq!(zero[9] - zero[0], 9);
    assert!(zero[0] <= 40);
    assert_eq!(zero[0], occlusion_start(50, 10, 42));
    assert_eq!(occlude(&m, 10, 42).unwrap(), o);
}

#[test]
fn mouth_io_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let m = random_mouths(3, 10);
    let p = dir.path().join("a.mroi");
    write_mroi(&p, &m).unwrap();
    assert_eq!(read_mouths(&p).unwrap(), m);
    let bytes = std::fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"MROI");
    assert_eq!(bytes.len(), 16 + 3 * 88 * 88);
    let d = dir.path().join("frames");
    write_pgm_dir(&d, &m).unwrap();
    assert!(d.join("frame_00000.pgm").exists());
    assert_eq!(read_mouths(&d).unwrap(), m);
    std::fs::write(&p, b"NOPE0000000000000000").unwrap();
    assert!(read_mroi(&p).is_err());
}

#[test]
fn encoder_shapes_and_translation() {
    let (store, enc) = build(11, |i| AudioEncoder::new(&mut i.sub("enc"), 16).unwrap());
    let mut g = Graph::<f64>::inference();
    let x = g.input(rand_arr(&[1, 2, 20, 17], 12));
    let y = enc.forward(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[1, 16, 20, 17]);
    assert!(matches!(
        build(0, |i| AudioEncoder::new(i, 18)).1,
        Err(avsep_core::Error::Config(_))
    ));

    // zero input: the response is the same at every position
    let z = g.input(ArrayD::zeros(IxDyn(&[1, 2, 9, 9])));
    let zy = enc.forward(&mut g, &store, z).unwrap();
    let v = g.value(zy);
    for c in 0..16 {
        for t in 0..9 {
            for f in 0..9 {
                assert!((v[[0, c, t, f]] - v[[0, c, 4, 4]]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn encoder_time_equivariance_before_norm() {
    // group norm statistics depend on the whole map, so compare pre-norm branch outputs
    let (store, _) = build(13, |i| AudioEncoder::new(&mut i.sub("enc"), 8).unwrap());
    let x = rand_arr(&[1, 2, 30, 11], 14);
    let k = 3;
    let mut shifted = ArrayD::zeros(IxDyn(&[1, 2, 30, 11]));
    for t in k..30 {
        for c in 0..2 {
            for f in 0..11 {
                shifted[[0, c, t, f]] = x[[0, c, t - k, f]];
            }
        }
    }
    let mut g = Graph::<f64>::inference();
    for b in 0..4 {
        let w = g.param(&store, store.id(&format!("enc.branch{b}.weight")).unwrap());
        let d = AudioEncoder::DILATIONS[b];
        let xa = g.input(x.clone());
        let xb = g.input(shifted.clone());
        let ya = g.conv2d(xa, w, None, d);
        let yb = g.conv2d(xb, w, None, d);
        let (va, vb) = (g.value(ya), g.value(yb));
        for c in 0..2 {
            for t in (k + 3)..(30 - 3) {
                for f in 0..11 {
                    assert!((vb[[0, c, t, f]] - va[[0, c, t - k, f]]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn interpolation_properties() {
    let m = interp_matrix::<f64>(5, 5).unwrap();
    assert_eq!(m, Array2::eye(5));
    let m = interp_matrix::<f64>(50, 251).unwrap();
    for row in m.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    assert_eq!(m[[0, 0]], 1.0);
    assert_eq!(m[[250, 49]], 1.0);
    assert!(interp_matrix::<f64>(1, 5).is_err());
}

#[test]
fn aligned_semantics_are_constant_along_frequency() {
    let (store, al) = build(15, |i| SemanticAligner::new(&mut i.sub("align"), 8, 16));
    let l = SemanticStream {
        features: rand_arr(&[50, 8], 16).into_dimensionality().unwrap(),
        source: StreamSource::VideoOnly,
    };
    let a = al.align(&store, &l, 251, 257).unwrap();
    let full = a.expand();
    assert_eq!(full.dim(), (16, 251, 257));
    for c in 0..16 {
        for t in 0..251 {
            assert!(full.slice(ndarray::s![c, t, ..]).iter().all(|&v| v == full[[c, t, 0]]));
        }
    }
    // a constant-in-time stream stays constant in time
    let row = rand_arr(&[1, 8], 17);
    let constant = SemanticStream {
        features: Array2::from_shape_fn((50, 8), |(_, c)| row[[0, c]]),
        source: StreamSource::VideoOnly,
    };
    let a = al.align(&store, &constant, 251, 4).unwrap();
    for c in 0..16 {
        for t in 0..251 {
            assert!((a.data[[c, t]] - a.data[[c, 0]]).abs() < 1e-12);
        }
    }
}

#[test]
fn fusion_shapes_and_symmetry() {
    for s in 1..=4 {
        let (store, fu) = build(18, |i| SpFusion::new(&mut i.sub("fusion"), 8, s).unwrap());
        let mut g = Graph::<f64>::inference();
        let y = g.input(rand_arr(&[1, 8, 5, 7], 19));
        let ls: Vec<Var> = (0..s).map(|i| g.input(rand_arr(&[1, 8, 5], 20 + i as u64))).collect();
        let cat = fu.pre_reduction(&mut g, &store, y, &ls).unwrap();
        assert_eq!(g.shape(cat), &[1, (s + 2) * 8, 5, 7]);
        let out = fu.forward(&mut g, &store, y, &ls).unwrap();
        assert_eq!(g.shape(out), &[1, 8, 5, 7]);
        if s == 2 {
            let swapped = fu.pre_reduction(&mut g, &store, y, &[ls[1], ls[0]]).unwrap();
            let (a, b) = (g.value(cat).clone(), g.value(swapped).clone());
            let block = |x: &ArrayD<f64>, i: usize| x.slice_axis(ndarray::Axis(1), (i * 8..(i + 1) * 8).into()).to_owned();
            assert_eq!(block(&a, 0), block(&b, 0));
            assert_eq!(block(&a, 1), block(&b, 2));
            assert_eq!(block(&a, 2), block(&b, 1));
            assert!((&block(&a, 3) - &block(&b, 3)).iter().all(|v| v.abs() < 1e-12));
        }
    }
    assert!(build(0, |i| SpFusion::new(i, 8, 0)).1.is_err());
    let (store, fu) = build(18, |i| SpFusion::new(&mut i.sub("fusion"), 8, 2).unwrap());
    let mut g = Graph::<f64>::inference();
    let y = g.input(rand_arr(&[1, 8, 5, 7], 19));
    let z = g.input(ArrayD::zeros(IxDyn(&[1, 8, 5])));
    let bad = g.input(ArrayD::zeros(IxDyn(&[1, 8, 4])));
    let a = fu.forward(&mut g, &store, y, &[z, z]).unwrap();
    let b = fu.forward(&mut g, &store, y, &[z, z]).unwrap();
    assert_eq!(g.value(a), g.value(b));
    assert!(g.value(a).iter().all(|v| v.is_finite()));
    assert!(fu.forward(&mut g, &store, y, &[z, bad]).is_err());
    assert!(fu.forward(&mut g, &store, y, &[z]).is_err());
}

/// Nested-loop reference for `unfold_axis`.
fn unfold_oracle(x: &Array3<f64>, axis: Axis, win: usize, stride: usize) -> Array3<f64> {
    let (c, t, f) = x.dim();
    let len = if axis == Axis::Time { t } else { f };
    let mut padded = len.max(win);
    while (padded - win) % stride != 0 {
        padded += 1;
    }
    let n = (padded - win) / stride + 1;
    let shape = if axis == Axis::Time { (c * win, n, f) } else { (c * win, t, n) };
    let mut out = Array3::zeros(shape);
    for i in 0..win {
        for ch in 0..c {
            for p in 0..n {
                let src = p * stride + i;
                if src >= len {
                    continue;
                }
                if axis == Axis::Time {
                    for k in 0..f {
                        out[[i * c + ch, p, k]] = x[[ch, src, k]];
                    }
                } else {
                    for k in 0..t {
                        out[[i * c + ch, k, p]] = x[[ch, k, src]];
                    }
                }
            }
        }
    }
    out
}

#[test]
fn unfold_axis_matches_loop_oracle() {
    for len in 1..=12 {
        for win in 1..=5 {
            for stride in 1..=3 {
                for axis in [Axis::Time, Axis::Frequency] {
                    let shape = if axis == Axis::Time { [2, len, 3] } else { [2, 3, len] };
                    let x: Array3<f64> = rand_arr(&shape, (len * 100 + win * 10 + stride) as u64)
                        .into_dimensionality()
                        .unwrap();
                    assert_eq!(
                        unfold_axis(&x, axis, win, stride).unwrap(),
                        unfold_oracle(&x, axis, win, stride),
                        "len {len} I {win} J {stride} {axis:?}"
                    );
                }
            }
        }
    }
    let x = Array3::<f64>::zeros((2, 10, 3));
    assert_eq!(unfold_axis(&x, Axis::Time, 4, 1).unwrap().dim().1, 7);
    assert_eq!(unfold_axis(&x, Axis::Time, 4, 4).unwrap().dim().1, 3);
    assert_eq!(unfold_axis(&x, Axis::Time, 1, 1).unwrap(), x);
    assert!(unfold_axis(&x, Axis::Time, 0, 1).is_err());
    assert!(unfold_axis(&x, Axis::Time, 1, 0).is_err());
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Dense single-direction LSTM over `xs[t][d]`, gate order (i, f, g, o).
fn lstm_oracle(xs: &[Vec<f64>], w_ih: &ArrayD<f64>, w_hh: &ArrayD<f64>, b: &ArrayD<f64>, reverse: bool) -> Vec<Vec<f64>> {
    let h = w_hh.shape()[0];
    let mut hs = vec![0.0; h];
    let mut cs = vec![0.0; h];
    let mut out = vec![vec![0.0; h]; xs.len()];
    let order: Vec<usize> = if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
    for t in order {
        let mut z = vec![0.0; 4 * h];
        for (j, zj) in z.iter_mut().enumerate() {
            *zj = b[[j]]
                + xs[t].iter().enumerate().map(|(d, v)| v * w_ih[[d, j]]).sum::<f64>()
                + hs.iter().enumerate().map(|(k, v)| v * w_hh[[k, j]]).sum::<f64>();
        }
        for k in 0..h {
            let (i, f, g, o) = (sigmoid(z[k]), sigmoid(z[h + k]), z[2 * h + k].tanh(), sigmoid(z[3 * h + k]));
            cs[k] = f * cs[k] + i * g;
            hs[k] = o * cs[k].tanh();
        }
        out[t] = hs.clone();
    }
    out
}

#[test]
fn branch_module_matches_reference() {
    let (c, t, f, hid, win) = (4, 6, 6, 3, 4);
    let spec = BranchSpec { window: win, stride: 1 };
    let (mut store, br) = build(21, |i| BranchModule::new(&mut i.sub("b"), c, hid, spec));
    // non-trivial norm affine and output bias
    for name in ["b.norm.gamma", "b.norm.beta", "b.out_bias"] {
        let id = store.id(name).unwrap();
        *store.value_mut(id) = rand_arr(&[c], 22);
    }
    let x: Array3<f64> = rand_arr(&[c, t, f], 23).into_dimensionality().unwrap();
    let mut g = Graph::<f64>::inference();
    let xv = g.input(x.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let y = br.forward(&mut g, &store, xv, Axis::Time);
    let got = g.value(y).clone();

    let p = |n: &str| store.value(store.id(n).unwrap()).clone();
    let (gamma, beta) = (p("b.norm.gamma"), p("b.norm.beta"));
    let (w_in, b_in, w_out, bias) = (p("b.lin_in.weight"), p("b.lin_in.bias"), p("b.lin_out.weight"), p("b.out_bias"));
    let mut normed = Array3::<f64>::zeros((c, t, f));
    for ti in 0..t {
        for fi in 0..f {
            let col: Vec<f64> = (0..c).map(|ch| x[[ch, ti, fi]]).collect();
            let mean = col.iter().sum::<f64>() / c as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            for ch in 0..c {
                normed[[ch, ti, fi]] = gamma[[ch]] * (col[ch] - mean) / (var + 1e-5).sqrt() + beta[[ch]];
            }
        }
    }
    let u = unfold_oracle(&normed, Axis::Time, win, 1);
    let n = u.dim().1;
    for fi in 0..f {
        let seq: Vec<Vec<f64>> = (0..n)
            .map(|pi| {
                (0..hid)
                    .map(|h| b_in[[h]] + (0..c * win).map(|k| u[[k, pi, fi]] * w_in[[k, h]]).sum::<f64>())
                    .collect()
            })
            .collect();
        let fw = lstm_oracle(&seq, &p("b.rnn.fwd.w_ih"), &p("b.rnn.fwd.w_hh"), &p("b.rnn.fwd.bias"), false);
        let bw = lstm_oracle(&seq, &p("b.rnn.bwd.w_ih"), &p("b.rnn.bwd.w_hh"), &p("b.rnn.bwd.bias"), true);
        let mut acc = vec![vec![0.0; c]; t];
        for pi in 0..n {
            let hcat: Vec<f64> = fw[pi].iter().chain(&bw[pi]).copied().collect();
            for i in 0..win {
                for ch in 0..c {
                    let o: f64 = hcat.iter().enumerate().map(|(k, v)| v * w_out[[k, i * c + ch]]).sum();
                    if pi + i < t {
                        acc[pi + i][ch] += o;
                    }
                }
            }
        }
        for ti in 0..t {
            for ch in 0..c {
                let want = x[[ch, ti, fi]] + bias[[ch]] + acc[ti][ch];
                assert!((got[[0, ch, ti, fi]] - want).abs() < 1e-12, "({ch},{ti},{fi})");
            }
        }
    }
}

#[test]
fn zeroed_branch_is_identity() {
    let spec = BranchSpec { window: 4, stride: 2 };
    let (mut store, br) = build(24, |i| BranchModule::new(&mut i.sub("b"), 4, 3, spec));
    let id = store.id("b.lin_out.weight").unwrap();
    store.value_mut(id).fill(0.0);
    let mut g = Graph::<f64>::inference();
    let x = g.input(rand_arr(&[2, 4, 7, 9], 25));
    for axis in [Axis::Time, Axis::Frequency] {
        let y = br.forward(&mut g, &store, x, axis);
        assert_eq!(g.value(y), g.value(x));
    }
}

#[test]
fn mst_shapes_attention_and_param_monotonicity() {
    let cfg = MstConfig {
        channels: 16,
        hidden: 4,
        blocks: 2,
        heads: 4,
        qk_dim: 2,
        ..Default::default()
    };
    let (store, sep) = build(26, |i| Separator::new(&mut i.sub("mst"), &cfg).unwrap());
    let mut g = Graph::<f64>::inference();
    let x = g.input(rand_arr(&[1, 16, 20, 17], 27));
    let (y, weights) = sep.forward_probed(&mut g, &store, x).unwrap();
    assert_eq!(g.shape(y), &[1, 16, 20, 17]);
    assert_eq!(weights.len(), 2);
    for w in &weights {
        assert_eq!(w.dim(), (4, 20, 20));
        for row in w.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
    // B=1 is a single block call
    let one = MstConfig { blocks: 1, ..cfg.clone() };
    let (s1, sep1) = build(26, |i| Separator::new(&mut i.sub("mst"), &one).unwrap());
    let (s2, blk) = build(26, |i| MstBlock::new(&mut i.sub("mst").sub("block0"), &one));
    let mut g = Graph::<f64>::inference();
    let x = g.input(rand_arr(&[1, 16, 6, 9], 28));
    let a = sep1.forward(&mut g, &s1, x).unwrap();
    let (b, _) = blk.forward(&mut g, &s2, x);
    assert_eq!(g.value(a), g.value(b));

    let global = MstConfig {
        branches: vec![BranchSpec::GLOBAL],
        ..cfg.clone()
    };
    let (sg, _) = build(0, |i| Separator::new(i, &global).unwrap());
    assert!(sg.count() < store.count());

    let bad = MstConfig { heads: 3, ..cfg.clone() };
    assert!(bad.validate().is_err());
    let bad = MstConfig { branches: vec![BranchSpec { window: 4, stride: 1 }], ..cfg };
    assert!(bad.validate().is_err());
}

#[test]
fn decoder_contract() {
    for s in [2, 4] {
        let (store, dec) = build(29, |i| Decoder::new(&mut i.sub("dec"), 8, s).unwrap());
        let mut g = Graph::<f64>::inference();
        let x = g.input(ArrayD::zeros(IxDyn(&[1, 8, 5, 6])));
        let y = dec.forward(&mut g, &store, x);
        let v: Array3<f64> = g.value(y).clone().index_axis_move(ndarray::Axis(0), 0).into_dimensionality().unwrap();
        let parts = Decoder::split(&v);
        assert_eq!(parts.len(), s);
        let bias = store.value(store.id("dec.conv.bias").unwrap());
        for (i, p) in parts.iter().enumerate() {
            assert_eq!(p.dim(), (2, 5, 6));
            assert!(p.slice(ndarray::s![0, .., ..]).iter().all(|&v| v == bias[[2 * i]]));
            assert!(p.slice(ndarray::s![1, .., ..]).iter().all(|&v| v == bias[[2 * i + 1]]));
        }
    }
    assert!(build(0, |i| Decoder::new(i, 8, 0)).1.is_err());
}

const TOL: f64 = 1e-4;

#[test]
fn encoder_and_fusion_gradients() {
    for seed in 0..5 {
        let (store, enc) = build(30 + seed, |i| AudioEncoder::new(&mut i.sub("enc"), 8).unwrap());
        let x = rand_arr(&[1, 2, 5, 7], 40 + seed);
        let r = check_params(&store, |g, s| {
            let xv = g.constant(x.clone());
            let y = enc.forward(g, s, xv).unwrap();
            probe(g, y, 50 + seed)
        }, 1e-6, 12, seed);
        assert!(r.max_rel_error < TOL, "encoder {r:?}");

        let (store, (al, fu)) = build(60 + seed, |i| {
            (SemanticAligner::new(&mut i.sub("align"), 3, 8), SpFusion::new(&mut i.sub("fusion"), 8, 2).unwrap())
        });
        let y0 = rand_arr(&[1, 8, 5, 4], 70 + seed);
        let streams = [rand_arr(&[3, 3], 80 + seed), rand_arr(&[3, 3], 90 + seed)];
        let r = check_params(&store, |g, s| {
            let y = g.constant(y0.clone());
            let ls: Vec<Var> = streams
                .iter()
                .map(|l| {
                    let lv = g.constant(l.clone());
                    let a = al.forward(g, s, lv, 5).unwrap();
                    g.reshape(a, &[1, 8, 5])
                })
                .collect();
            let out = fu.forward(g, s, y, &ls).unwrap();
            probe(g, out, 100 + seed)
        }, 1e-6, 12, seed);
        assert!(r.max_rel_error < TOL, "fusion {r:?}");
    }
}

#[test]
fn mst_block_gradients() {
    let cfg = MstConfig {
        channels: 8,
        hidden: 4,
        blocks: 1,
        heads: 2,
        qk_dim: 2,
        ..Default::default()
    };
    for seed in 0..5 {
        let (store, blk) = build(110 + seed, |i| MstBlock::new(&mut i.sub("blk"), &cfg));
        let x = rand_arr(&[1, 8, 6, 9], 120 + seed);
        let r = check_params(&store, |g, s| {
            let xv = g.constant(x.clone());
            let (y, _) = blk.forward(g, s, xv);
            probe(g, y, 130 + seed)
        }, 1e-6, 8, seed);
        assert!(r.max_rel_error < TOL, "mst {r:?}");
    }
}

#[test]
fn semantic_encoder_gradients() {
    let vcfg = VsrConfig {
        channels: [2, 2, 3],
        ..Default::default()
    };
    let plan = Stft::<f64>::new(&StftConfig::default()).unwrap();
    for seed in 0..5 {
        let (store, (vsr, asr, av)) = build(140 + seed, |i| {
            (
                VsrEncoder::new(&mut i.sub("vsr"), &vcfg, 4).unwrap(),
                AsrEncoder::new(&mut i.sub("asr"), &AsrConfig { hidden: 4, kernel: 3 }, 257, 4).unwrap(),
                AvFusion::new(&mut i.sub("av"), 4),
            )
        });
        let frames = random_mouths(4, 150 + seed).to_input::<f64>();
        let wav = rand_arr(&[2560], 160 + seed).into_raw_vec_and_offset().0;
        let lm = asr.prepare(&wav, 16000, &plan, 4).unwrap();
        let r = check_params(&store, |g, s| {
            let x = g.constant(frames.clone());
            let v = vsr.forward(g, s, x);
            let a = asr.forward(g, s, &lm, 4);
            let y = av.forward(g, s, v, a).unwrap();
            probe(g, y, 170 + seed)
        }, 1e-7, 6, seed);
        assert!(r.max_rel_error < TOL, "semantic encoders {r:?}");
    }
}

fn tiny_net(seed: u64) -> (ModelConfig, ParamStore<f64>, SeparationNet, Rc<Stft<f64>>) {
    let mut cfg = ModelConfig::tiny();
    cfg.stft = StftConfig {
        window_ms: 1.0,
        hop_ms: 0.25,
        ..Default::default()
    };
    let plan = Rc::new(Stft::new(&cfg.stft).unwrap());
    let (store, net) = build(seed, |i| SeparationNet::new(i, &cfg).unwrap());
    (cfg, store, net, plan)
}

#[test]
fn full_model_gradient_tiny() {
    // T = 6 frames, F = 9 bins
    let (cfg, store, net, plan) = tiny_net(180);
    assert_eq!((plan.frames(20), plan.bins()), (6, 9));
    let mix = rand_arr(&[20], 181).into_raw_vec_and_offset().0;
    let streams: Vec<ArrayD<f64>> = (0..2).map(|s| rand_arr(&[2, cfg.cv], 182 + s)).collect();
    let r = check_params(&store, |g, s| {
        let st: Vec<Var> = streams.iter().map(|a| g.constant(a.clone())).collect();
        let y = net.forward(g, s, &plan, &[&mix], &[st]).unwrap();
        probe(g, y, 190)
    }, 1e-6, 4, 3);
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn full_forward_is_deterministic_and_length_preserving() {
    let (cfg, store, net, plan) = tiny_net(200);
    let mix = rand_arr(&[37], 201).into_raw_vec_and_offset().0;
    let run = || {
        let mut g = Graph::<f64>::inference();
        let st: Vec<Var> = (0..2).map(|s| g.input(rand_arr(&[3, cfg.cv], 202 + s))).collect();
        let y = net.forward(&mut g, &store, &plan, &[&mix], &[st]).unwrap();
        g.value(y).clone()
    };
    let a = run();
    assert_eq!(a.shape(), &[1, 2, 37]);
    assert_eq!(a, run());
}
