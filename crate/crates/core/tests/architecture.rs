//! Structural invariants of the encoder/decoder: patch counts,
//! causality, equivariance, incremental-decode equivalence, and
//! checkpoint round trips.

mod common;

use common::{rand_image, rand_tensor, tiny_decoder_config, tiny_encoder_config};
use lineocr::checkpoint::Checkpoint;
use lineocr::decoder::{self, DecoderConfig};
use lineocr::encoder::{self, patchify, EncoderConfig};
use lineocr::model::OcrModel;
use lineocr::rng::rng_from;
use lineocr::tensor::{masked_score, Graph, Tensor};
use lineocr::ImageTensor;
use lineocr::ModelConfig;
use rand::Rng;

fn tiny_model(seed: u64) -> OcrModel<f64> {
    OcrModel::init(
        ModelConfig {
            encoder: tiny_encoder_config(),
            decoder: tiny_decoder_config(12),
        },
        seed,
    )
    .unwrap()
}

// ── patchify ─────────────────────────────────────────────────────────

#[test]
fn single_patch_is_whole_image() {
    let mut rng = rng_from(1, &[0]);
    let img = rand_image(4, 4, &mut rng);
    let t: Tensor<f64> = patchify(&img, 4).unwrap();
    assert_eq!(t.shape(), &[1, 16]);
    let flat: Vec<f64> = img.pixels().iter().map(|&p| p as f64).collect();
    assert_eq!(t.data(), &flat[..]);
}

#[test]
fn patch_count_follows_the_area_law() {
    // N = H*W/P^2 over the full config grid, plus 1 or 2 specials.
    for h in [16usize, 32, 48, 64] {
        for w in [16usize, 32, 48, 64] {
            for p in [4usize, 8, 16] {
                for dist in [false, true] {
                    let cfg = EncoderConfig {
                        resize_h: h,
                        resize_w: w,
                        patch: p,
                        channels: 1,
                        hidden: 8,
                        layers: 0,
                        heads: 2,
                        ffn: 16,
                        use_distillation_token: dist,
                        dropout: 0.0,
                    };
                    assert_eq!(cfg.num_patches(), h * w / (p * p));
                    assert_eq!(cfg.seq_len(), h * w / (p * p) + if dist { 2 } else { 1 });
                }
            }
        }
    }
}

#[test]
fn reference_resolution_patch_count() {
    // 384x384 input, 16x16 patches, 3 channels: 576 patches of 768 values.
    let cfg = EncoderConfig {
        resize_h: 384,
        resize_w: 384,
        patch: 16,
        channels: 3,
        hidden: 8,
        layers: 0,
        heads: 2,
        ffn: 16,
        use_distillation_token: true,
        dropout: 0.0,
    };
    assert_eq!(cfg.num_patches(), 576);
    assert_eq!(cfg.patch_dim(), 768);
    let img = ImageTensor::constant(3, 384, 384, 0.5);
    let t: Tensor<f32> = patchify(&img, 16).unwrap();
    assert_eq!(t.shape(), &[576, 768]);
}

#[test]
fn patchify_matches_nested_loop_oracle() {
    let mut rng = rng_from(2, &[1]);
    let img = rand_image(4, 4, &mut rng);
    let p = 2usize;
    let t: Tensor<f64> = patchify(&img, p).unwrap();
    // brute-force double loop over the patch grid
    let grid = 4 / p;
    for py in 0..grid {
        for px in 0..grid {
            let row = t.row(py * grid + px);
            let mut want = Vec::new();
            for dy in 0..p {
                for dx in 0..p {
                    want.push(img.get(0, py * p + dy, px * p + dx) as f64);
                }
            }
            assert_eq!(row, &want[..], "patch ({py},{px})");
        }
    }
}

#[test]
fn patchify_rejects_indivisible_dims() {
    let img = ImageTensor::constant(1, 5, 4, 1.0);
    assert!(patchify::<f64>(&img, 2).is_err());
}

// ── embed ────────────────────────────────────────────────────────────

#[test]
fn embed_with_zero_projection_keeps_class_row() {
    let cfg = tiny_encoder_config();
    let model = tiny_model(3);
    let mut params = model.params.clone();
    for name in [
        "encoder.patch_proj.weight",
        "encoder.patch_proj.bias",
        "encoder.pos",
    ] {
        let t = params.get_mut(name).unwrap();
        let n = t.numel();
        t.data_mut().copy_from_slice(&vec![0.0; n]);
    }
    let mut g = Graph::inference();
    let mut rng = rng_from(4, &[2]);
    let img = rand_image(4, 4, &mut rng);
    let patches = g.constant(patchify::<f64>(&img, cfg.patch).unwrap());
    let out = encoder::embed(&mut g, &cfg, &params, patches).unwrap();
    let v = g.value(out);
    assert_eq!(v.row(0), params.get("encoder.cls").unwrap().data());
    for r in 1..v.rows() {
        assert!(v.row(r).iter().all(|&x| x == 0.0), "patch row {r} nonzero");
    }
}

#[test]
fn distillation_token_changes_length_by_one() {
    let base = tiny_encoder_config();
    let with_dist = EncoderConfig {
        use_distillation_token: true,
        ..base.clone()
    };
    assert_eq!(with_dist.seq_len(), base.seq_len() + 1);

    let m1 = OcrModel::<f64>::init(
        ModelConfig {
            encoder: base,
            decoder: tiny_decoder_config(8),
        },
        5,
    )
    .unwrap();
    let m2 = OcrModel::<f64>::init(
        ModelConfig {
            encoder: with_dist,
            decoder: tiny_decoder_config(8),
        },
        5,
    )
    .unwrap();
    let mut rng = rng_from(6, &[3]);
    let img = rand_image(4, 4, &mut rng);
    let mem1 = m1.encode_image(&img).unwrap();
    let mem2 = m2.encode_image(&img).unwrap();
    assert_eq!(mem2.rows(), mem1.rows() + 1);
}

#[test]
fn embed_rows_match_direct_recomputation() {
    let cfg = tiny_encoder_config();
    let model = tiny_model(7);
    let mut rng = rng_from(8, &[4]);
    let img = rand_image(4, 4, &mut rng);
    let patches: Tensor<f64> = patchify(&img, cfg.patch).unwrap();
    let mut g = Graph::inference();
    let pid = g.constant(patches.clone());
    let out = encoder::embed(&mut g, &cfg, &model.params, pid).unwrap();
    let v = g.value(out);

    let w = model.params.get("encoder.patch_proj.weight").unwrap();
    let b = model.params.get("encoder.patch_proj.bias").unwrap();
    let pos = model.params.get("encoder.pos").unwrap();
    let ns = cfg.num_special();
    for k in 0..cfg.num_patches() {
        for j in 0..cfg.hidden {
            let mut want = b.data()[j] + pos.at(k + ns, j);
            for i in 0..cfg.patch_dim() {
                want += patches.at(k, i) * w.at(i, j);
            }
            let got = v.at(k + ns, j);
            assert!(
                (got - want).abs() < 1e-9,
                "row {k} col {j}: got {got}, want {want}"
            );
        }
    }
}

#[test]
fn embed_overlong_patch_sequence_is_a_length_error() {
    let cfg = tiny_encoder_config();
    let model = tiny_model(9);
    let mut g = Graph::<f64>::inference();
    // 9 patches > pos table of 4 + 1
    let patches = g.constant(Tensor::zeros(vec![9, cfg.patch_dim()]));
    let err = encoder::embed(&mut g, &cfg, &model.params, patches).unwrap_err();
    assert!(matches!(err, lineocr::Error::SequenceLength { .. }));
}

// ── encoder stack ────────────────────────────────────────────────────

#[test]
fn zero_layer_encoder_is_norm_of_embedding() {
    let cfg = EncoderConfig {
        layers: 0,
        ..tiny_encoder_config()
    };
    let model = OcrModel::<f64>::init(
        ModelConfig {
            encoder: cfg.clone(),
            decoder: tiny_decoder_config(8),
        },
        10,
    )
    .unwrap();
    let mut rng = rng_from(11, &[5]);
    let img = rand_image(4, 4, &mut rng);

    let mut g = Graph::inference();
    let mem = encoder::encode_into(&mut g, &cfg, &model.params, &img, None).unwrap();
    let got = g.value(mem).clone();

    let mut g2 = Graph::inference();
    let patches = g2.constant(patchify::<f64>(&img, cfg.patch).unwrap());
    let emb = encoder::embed(&mut g2, &cfg, &model.params, patches).unwrap();
    let gain = g2.param(
        "encoder.final_norm.gain",
        model.params.get("encoder.final_norm.gain").unwrap(),
    );
    let bias = g2.param(
        "encoder.final_norm.bias",
        model.params.get("encoder.final_norm.bias").unwrap(),
    );
    let want = g2.layer_norm(emb, gain, bias, 1e-5).unwrap();
    assert_eq!(got.data(), g2.value(want).data());
}

#[test]
fn encoder_is_equivariant_to_patch_permutation() {
    // with positions zeroed, swapping two input patches swaps the two
    // output rows and leaves the rest (including CLS) unchanged.
    let cfg = tiny_encoder_config();
    let model = tiny_model(12);
    let mut params = model.params.clone();
    {
        let pos = params.get_mut("encoder.pos").unwrap();
        let n = pos.numel();
        pos.data_mut().copy_from_slice(&vec![0.0; n]);
    }
    let mut rng = rng_from(13, &[6]);
    let img = rand_image(4, 4, &mut rng);
    let patches: Tensor<f64> = patchify(&img, cfg.patch).unwrap();
    // swap patch rows 1 and 3
    let mut swapped_rows: Vec<Vec<f64>> = (0..4).map(|r| patches.row(r).to_vec()).collect();
    swapped_rows.swap(1, 3);
    let swapped = Tensor::from_rows(&swapped_rows).unwrap();

    let run = |p: &Tensor<f64>| -> Tensor<f64> {
        let mut g = Graph::inference();
        let pid = g.constant(p.clone());
        let emb = encoder::embed(&mut g, &cfg, &params, pid).unwrap();
        // run the block stack manually (encode_into would re-patchify)
        let mut x = emb;
        for layer in 0..cfg.layers {
            x = encoder_block_for_test(&mut g, &cfg, &params, x, layer);
        }
        let gain = g.param(
            "encoder.final_norm.gain",
            params.get("encoder.final_norm.gain").unwrap(),
        );
        let bias = g.param(
            "encoder.final_norm.bias",
            params.get("encoder.final_norm.bias").unwrap(),
        );
        let out = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        g.value(out).clone()
    };
    let base = run(&patches);
    let perm = run(&swapped);

    let tol = 1e-12;
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol);
    assert!(close(base.row(0), perm.row(0)), "CLS row changed");
    assert!(close(base.row(2), perm.row(4)), "row 1<->3 swap (front)");
    assert!(close(base.row(4), perm.row(2)), "row 1<->3 swap (back)");
    assert!(close(base.row(3), perm.row(3)), "untouched row changed");
}

// mirror of the encoder block using public graph ops only
fn encoder_block_for_test(
    g: &mut Graph<f64>,
    cfg: &EncoderConfig,
    params: &lineocr::ParamSet<f64>,
    x: lineocr::tensor::TensorId,
    layer: usize,
) -> lineocr::tensor::TensorId {
    let lin = |g: &mut Graph<f64>, x, name: &str| {
        let w = g.param(
            &format!("{name}.weight"),
            params.get(&format!("{name}.weight")).unwrap(),
        );
        let b = g.param(
            &format!("{name}.bias"),
            params.get(&format!("{name}.bias")).unwrap(),
        );
        let xw = g.matmul(x, w).unwrap();
        g.add(xw, b).unwrap()
    };
    let nrm = |g: &mut Graph<f64>, x, name: &str| {
        let gain = g.param(
            &format!("{name}.gain"),
            params.get(&format!("{name}.gain")).unwrap(),
        );
        let bias = g.param(
            &format!("{name}.bias"),
            params.get(&format!("{name}.bias")).unwrap(),
        );
        g.layer_norm(x, gain, bias, 1e-5).unwrap()
    };
    let p = format!("encoder.layer{layer}");
    let h = nrm(g, x, &format!("{p}.norm1"));
    let q = lin(g, h, &format!("{p}.self_attn.wq"));
    let k = lin(g, h, &format!("{p}.self_attn.wk"));
    let v = lin(g, h, &format!("{p}.self_attn.wv"));
    let a = g.attention(q, k, v, cfg.heads, None).unwrap();
    let o = lin(g, a, &format!("{p}.self_attn.wo"));
    let x = g.add(x, o).unwrap();
    let h2 = nrm(g, x, &format!("{p}.norm2"));
    let f1 = lin(g, h2, &format!("{p}.ffn.fc1"));
    let f1 = g.gelu(f1);
    let f2 = lin(g, f1, &format!("{p}.ffn.fc2"));
    g.add(x, f2).unwrap()
}

#[test]
fn encoder_output_is_finite_on_unit_inputs() {
    for seed in 0..5 {
        let model = tiny_model(seed);
        let mut rng = rng_from(seed, &[7]);
        let img = rand_image(4, 4, &mut rng);
        let mem = model.encode_image(&img).unwrap();
        assert!(mem.all_finite());
    }
}

// ── decoder ──────────────────────────────────────────────────────────

#[test]
fn decoder_logit_shape_is_t_by_v() {
    let model = tiny_model(20);
    let mut rng = rng_from(21, &[8]);
    let memory = rand_tensor(vec![5, 8], 1.0, &mut rng);
    let logits = model.decoder_logits(&[1], &memory).unwrap();
    assert_eq!(logits.shape(), &[1, 12]);
}

#[test]
fn causality_is_bitwise_exact() {
    // changing token t+1 leaves logits rows 0..=t unchanged, exactly.
    let model = tiny_model(22);
    let mut rng = rng_from(23, &[9]);
    let memory = rand_tensor(vec![5, 8], 1.0, &mut rng);
    for t in 0..4usize {
        let mut tokens = vec![1u32, 4, 6, 8, 10];
        let base = model.decoder_logits(&tokens, &memory).unwrap();
        tokens[t + 1] = 11;
        let changed = model.decoder_logits(&tokens, &memory).unwrap();
        for row in 0..=t {
            assert_eq!(
                base.row(row),
                changed.row(row),
                "row {row} changed after editing token {}",
                t + 1
            );
        }
        assert_ne!(
            base.row(t + 1),
            changed.row(t + 1),
            "edited position should change its own logits"
        );
    }
}

#[test]
fn masked_scores_underflow_to_zero_probability() {
    // the -1e9 stand-in must vanish entirely under softmax
    let m: f64 = masked_score();
    assert_eq!((m - 50.0f64).exp(), 0.0);
    let mf: f32 = masked_score();
    assert_eq!((mf - 50.0f32).exp(), 0.0);
}

#[test]
fn next_token_distribution_is_normalized_and_recomputable() {
    for seed in 0..100 {
        let model = tiny_model(seed);
        let mut rng = rng_from(seed, &[10]);
        let memory = rand_tensor(vec![5, 8], 1.0, &mut rng);
        let tokens = vec![1u32, 3, 7];
        let dist = decoder::next_token_distribution(
            &model.config.decoder,
            &model.params,
            &tokens,
            &memory,
        )
        .unwrap();
        let sum: f64 = dist.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "seed {seed}: sum {sum}");

        // recompute independently from the full logits
        let logits = model.decoder_logits(&tokens, &memory).unwrap();
        let last = logits.row(tokens.len() - 1);
        let max = last.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = last.iter().map(|&x| (x - max).exp()).sum();
        for (j, &p) in dist.iter().enumerate() {
            let want = (last[j] - max).exp() / z;
            assert!((p - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_output_projection_gives_uniform_distribution() {
    let model = tiny_model(31);
    let mut params = model.params.clone();
    for name in ["decoder.out_proj.weight", "decoder.out_proj.bias"] {
        let t = params.get_mut(name).unwrap();
        let n = t.numel();
        t.data_mut().copy_from_slice(&vec![0.0; n]);
    }
    let mut rng = rng_from(32, &[11]);
    let memory = rand_tensor(vec![5, 8], 1.0, &mut rng);
    let dist =
        decoder::next_token_distribution(&model.config.decoder, &params, &[1, 2], &memory).unwrap();
    for &p in &dist {
        assert!((p - 1.0 / 12.0).abs() < 1e-12);
    }
}

#[test]
fn decoder_rejects_overlong_sequences() {
    let model = tiny_model(33);
    let mut rng = rng_from(34, &[12]);
    let memory = rand_tensor(vec![5, 8], 1.0, &mut rng);
    let tokens = vec![1u32; 9]; // max_positions = 8
    let err = model.decoder_logits(&tokens, &memory).unwrap_err();
    assert!(matches!(err, lineocr::Error::SequenceLength { .. }));
}

#[test]
fn zeroed_memory_changes_logits() {
    // guards against a decoder that ignores the image
    let model = tiny_model(35);
    let mut rng = rng_from(36, &[13]);
    let memory = rand_tensor(vec![5, 8], 1.0, &mut rng);
    let zero = Tensor::zeros(vec![5, 8]);
    let a = model.decoder_logits(&[1, 4], &memory).unwrap();
    let b = model.decoder_logits(&[1, 4], &zero).unwrap();
    assert_ne!(a.data(), b.data());
}

#[test]
fn incremental_decode_matches_full_forward() {
    // cached and uncached paths must produce identical distributions
    // within 1e-6 at 32-bit; checked at both precisions.
    fn check<T: lineocr::Element>(seed: u64, tol: f64) {
        let model = OcrModel::<T>::init(
            ModelConfig {
                encoder: tiny_encoder_config(),
                decoder: DecoderConfig {
                    layers: 2,
                    ..tiny_decoder_config(12)
                },
            },
            seed,
        )
        .unwrap();
        let mut rng = rng_from(seed, &[14]);
        let memory64 = rand_tensor(vec![5, 8], 1.0, &mut rng);
        let memory: Tensor<T> = memory64.cast();
        let tokens = [1u32, 5, 9, 2, 7];
        let full = model.decoder_logits(&tokens, &memory).unwrap();
        let mut session = model.decode_session(&memory).unwrap();
        for (t, &tok) in tokens.iter().enumerate() {
            let step_logits = session.step(tok).unwrap();
            for (j, &s) in step_logits.iter().enumerate() {
                let f = full.at(t, j).as_f64();
                assert!(
                    (s.as_f64() - f).abs() < tol,
                    "seed {seed} t={t} j={j}: incremental {s}, full {f}"
                );
            }
        }
    }
    for seed in 0..10 {
        check::<f32>(seed, 1e-6);
        check::<f64>(seed, 1e-12);
    }
}

// ── checkpoint round trip ────────────────────────────────────────────

#[test]
fn checkpoint_round_trip_preserves_logits_bitwise() {
    let model = tiny_model(40);
    let ckpt = Checkpoint::from_model(&model, "");
    let restored: OcrModel<f64> = Checkpoint::from_bytes(&ckpt.to_bytes())
        .unwrap()
        .into_model()
        .unwrap();
    let mut rng = rng_from(41, &[15]);
    let img = rand_image(4, 4, &mut rng);
    let mem_a = model.encode_image(&img).unwrap();
    let mem_b = restored.encode_image(&img).unwrap();
    assert_eq!(mem_a.data(), mem_b.data());
    let la = model.decoder_logits(&[1, 5, 3], &mem_a).unwrap();
    let lb = restored.decoder_logits(&[1, 5, 3], &mem_b).unwrap();
    assert_eq!(la.data(), lb.data());
}
