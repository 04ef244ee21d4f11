use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::autodiff::{NodeId, Tensor};

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        word_embed_dim: 6,
        user_embed_dim: 4,
        encoder_hidden: 4,
        decoder_hidden: 8,
        z_dim: 3,
        bow_hidden: 5,
        fact_rank: 2,
        vocab_size: 12,
        num_users: 4,
        init_scale: 0.3,
        ..ModelConfig::new(variant)
    }
}

fn batch() -> Batch {
    Batch {
        users: vec![1, 2],
        queries: vec![vec![4, 5, 6], vec![7]],
        replies: vec![vec![8, 9], vec![10, 11, 4]],
    }
}

fn values<T: Real>(net: &Net<'_, T>, id: NodeId) -> Vec<f64> {
    net.graph.value(id).to_f64()
}

fn zero_param(m: &mut Model<f64>, name: &str) {
    m.params.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn encoder_output_has_fixed_width() {
    let m = Model::<f64>::new(ModelConfig::toy(Variant::S2sa), 1).unwrap();
    for len in [1, 3, 9] {
        let mut net = m.net(false);
        let out = net.encode(&[vec![5; len]], false).unwrap();
        assert_eq!(net.graph.shape(out.h), &[1, 64]);
    }
}

#[test]
fn empty_encoder_input_is_rejected() {
    let m = Model::<f64>::new(tiny(Variant::S2sa), 1).unwrap();
    let mut net = m.net(false);
    assert!(matches!(net.encode(&[vec![]], false), Err(ModelError::EmptyInput(_))));
    assert!(matches!(net.encode(&[], false), Err(ModelError::EmptyInput(_))));
}

#[test]
fn padding_does_not_leak_into_shorter_rows() {
    let m = Model::<f64>::new(tiny(Variant::S2sa), 2).unwrap();
    let short = vec![4, 5];
    let mut alone = m.net(false);
    let a = alone.encode(std::slice::from_ref(&short), true).unwrap();
    let mut padded = m.net(false);
    let p = padded.encode(&[vec![6, 7, 8, 9], short], true).unwrap();
    let h_alone = values(&alone, a.h);
    let h_padded = &values(&padded, p.h)[8..];
    for (x, y) in h_alone.iter().zip(h_padded) {
        assert!((x - y).abs() < 1e-12);
    }
    // Per-position states for valid positions agree too.
    for t in 0..2 {
        let s_alone = values(&alone, a.states[t]);
        let s_padded = &values(&padded, p.states[t])[8..];
        for (x, y) in s_alone.iter().zip(s_padded) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!(p.mask.is_some());
    assert!(a.mask.is_none());
}

#[test]
fn encoding_is_deterministic() {
    let m = Model::<f32>::new(tiny(Variant::Cvae), 3).unwrap();
    let run = || {
        let mut net = m.net(false);
        let out = net.encode(&[vec![4, 5, 6]], false).unwrap();
        values(&net, out.h)
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_prior_weights_give_standard_normal() {
    let mut m = Model::<f64>::new(tiny(Variant::PaGenerator), 4).unwrap();
    zero_param(&mut m, "prior.w");
    zero_param(&mut m, "prior.b");
    zero_param(&mut m, "post.w");
    zero_param(&mut m, "post.b");
    let mut net = m.net(false);
    let enc = net.encode(&[vec![4, 5, 6]], false).unwrap();
    let e_u = net.user_embedding(&[2]).unwrap();
    let prior = net.prior_net(enc.h, e_u).unwrap();
    let enc_r = net.encode(&[vec![7, 8]], false).unwrap();
    let post = net.posterior_net(enc.h, enc_r.h).unwrap();
    for g in [prior, post] {
        let p = net.gaussian(g, 0);
        assert_eq!(p, GaussianParams::standard(3));
    }
}

#[test]
fn prior_depends_on_user_row_only_when_rows_differ() {
    let mut m = Model::<f64>::new(tiny(Variant::PaGenerator), 5).unwrap();
    let prior_for = |m: &Model<f64>, user: usize| {
        let mut net = m.net(false);
        let enc = net.encode(&[vec![4, 5]], false).unwrap();
        let e = net.user_embedding(&[user]).unwrap();
        let g = net.prior_net(enc.h, e).unwrap();
        net.gaussian(g, 0)
    };
    assert_ne!(prior_for(&m, 2), prior_for(&m, 0));
    let table = m.params.get_mut("embed.user").unwrap();
    let row0 = table.row_slice(0).to_vec();
    let d = row0.len();
    table.data_mut()[2 * d..3 * d].copy_from_slice(&row0);
    assert_eq!(prior_for(&m, 2), prior_for(&m, 0));
}

#[test]
fn posterior_ignores_user_table() {
    let mut m = Model::<f64>::new(tiny(Variant::PaGenerator), 6).unwrap();
    let post = |m: &Model<f64>| {
        let mut net = m.net(false);
        let q = net.encode(&[vec![4, 5]], false).unwrap();
        let r = net.encode(&[vec![6]], false).unwrap();
        let g = net.posterior_net(q.h, r.h).unwrap();
        net.gaussian(g, 0)
    };
    let before = post(&m);
    m.params.get_mut("embed.user").unwrap().data_mut().iter_mut().for_each(|v| *v += 1.0);
    assert_eq!(before, post(&m));
}

#[test]
fn sample_z_edge_cases() {
    let g = GaussianParams {
        mu: vec![0.5, -1.0],
        log_var: vec![0.3, -2.0],
    };
    assert_eq!(g.sample(&[0.0, 0.0]), g.mu);
    assert_eq!(GaussianParams::standard(2).sample(&[0.7, -0.2]), vec![0.7, -0.2]);

    let m = Model::<f64>::new(tiny(Variant::Cvae), 7).unwrap();
    let mut net = m.net(false);
    let mu = net.constant(vec![1, 2], g.mu.clone());
    let log_var = net.constant(vec![1, 2], g.log_var.clone());
    let noise = net.constant(vec![1, 2], vec![1.5, -0.5]);
    let z = net.sample_z(GaussNodes { mu, log_var }, noise).unwrap();
    assert_eq!(values(&net, z), g.sample(&[1.5, -0.5]));
}

#[test]
fn sample_moments_match_parameters() {
    let g = GaussianParams {
        mu: vec![0.8],
        log_var: vec![-0.6],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1_000_000;
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let z = g.sample(&[StandardNormal.sample(&mut rng)])[0];
        s += z;
        s2 += z * z;
    }
    let mean = s / n as f64;
    let std = (s2 / n as f64 - mean * mean).sqrt();
    assert!((mean - 0.8).abs() / 0.8 < 0.01, "mean {mean}");
    let expected = (-0.3f64).exp();
    assert!((std - expected).abs() / expected < 0.01, "std {std}");
}

fn first_step(m: &Model<f64>, user: usize) -> Vec<f64> {
    let mut net = m.net(false);
    let enc = net.encode(&[vec![4, 5, 6]], m.config.use_attention).unwrap();
    let z = if m.config.is_latent() {
        Some(net.prior_z(enc.h, &[user], None).unwrap().0)
    } else {
        None
    };
    let ctx = net.decode_context(&[user], z, &enc).unwrap();
    let st = net.init_decoder(enc.h).unwrap();
    let (logp, _) = net.decode_step(&[crate::corpus::BOS], st, &ctx).unwrap();
    values(&net, logp)
}

#[test]
fn decode_step_is_a_distribution_for_every_variant() {
    for v in Variant::ALL {
        let m = Model::<f64>::new(tiny(v), 8).unwrap();
        let total: f64 = first_step(&m, 1).iter().map(|lp| lp.exp()).sum();
        assert!((total - 1.0).abs() < 1e-6, "{v}: {total}");
    }
}

#[test]
fn vae_ignores_user() {
    let m = Model::<f64>::new(tiny(Variant::Vae), 9).unwrap();
    assert_eq!(first_step(&m, 1), first_step(&m, 3));
    let loss = |users: Vec<usize>| {
        let mut net = m.net(false);
        let b = Batch { users, ..batch() };
        let out = net.forward_train(&b, Some(&[0.1, -0.2, 0.3, 0.0, 0.5, -1.0])).unwrap();
        let lat = out.latent.unwrap();
        (values(&net, out.recon), values(&net, lat.bow), net.gaussian(lat.prior_user, 0))
    };
    assert_eq!(loss(vec![1, 2]), loss(vec![3, 0]));
}

#[test]
fn cvae_depends_on_user() {
    let m = Model::<f64>::new(tiny(Variant::Cvae), 9).unwrap();
    assert_ne!(first_step(&m, 1), first_step(&m, 3));
}

/// Copies every parameter `src` shares with `dst` by name.
fn transplant(src: &Model<f64>, dst: &mut Model<f64>) {
    for (name, t) in src.params.iter() {
        if let Some(d) = dst.params.get_mut(name) {
            if d.shape() == t.shape() {
                *d = t.clone();
            }
        }
    }
}

#[test]
fn fact_bias_with_zero_factors_matches_s2sa() {
    let s2sa = Model::<f64>::new(tiny(Variant::S2sa), 10).unwrap();
    let mut fb = Model::<f64>::new(tiny(Variant::FactBias), 11).unwrap();
    transplant(&s2sa, &mut fb);
    assert_ne!(first_step(&s2sa, 2), first_step(&fb, 2));
    zero_param(&mut fb, "fact.user");
    assert_eq!(first_step(&s2sa, 2), first_step(&fb, 2));
}

#[test]
fn fact_bias_zero_factors_and_rank() {
    let cfg = ModelConfig {
        num_users: 7,
        ..tiny(Variant::FactBias)
    };
    let mut m = Model::<f64>::new(cfg, 12).unwrap();
    let users: Vec<usize> = (0..7).collect();
    let mut net = m.net(false);
    let bias = net.fact_bias_logits(&users).unwrap();
    let rows = values(&net, bias);
    assert!(matrix_rank(&rows, 7, 12) <= 2);
    // Row 0 belongs to the unspecified user and is a live parameter.
    assert!(rows[..12].iter().any(|v| *v != 0.0));
    drop(net);
    zero_param(&mut m, "fact.user");
    let mut net = m.net(false);
    let bias = net.fact_bias_logits(&[3]).unwrap();
    assert!(values(&net, bias).iter().all(|v| *v == 0.0));
}

fn matrix_rank(data: &[f64], rows: usize, cols: usize) -> usize {
    let mut a: Vec<Vec<f64>> = data.chunks(cols).map(<[f64]>::to_vec).collect();
    let mut rank = 0;
    for c in 0..cols {
        let Some(p) = (rank..rows).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())) else {
            break;
        };
        if a[p][c].abs() < 1e-10 {
            continue;
        }
        a.swap(rank, p);
        for r in 0..rows {
            if r != rank {
                let f = a[r][c] / a[rank][c];
                for k in c..cols {
                    a[r][k] -= f * a[rank][k];
                }
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn speaker_with_silent_user_columns_matches_s2sa() {
    let s2sa = Model::<f64>::new(tiny(Variant::S2sa), 13).unwrap();
    let mut speaker = Model::<f64>::new(tiny(Variant::Speaker), 14).unwrap();
    transplant(&s2sa, &mut speaker);
    // dec.lstm.w differs in shape: word rows come first, then user rows.
    let src = s2sa.params.get("dec.lstm.w").unwrap();
    let dst = speaker.params.get_mut("dec.lstm.w").unwrap();
    let n = src.len();
    dst.data_mut()[..n].copy_from_slice(src.data());
    assert_ne!(first_step(&s2sa, 1), first_step(&speaker, 1));
    speaker.params.get_mut("dec.lstm.w").unwrap().data_mut()[n..].iter_mut().for_each(|v| *v = 0.0);
    assert_eq!(first_step(&s2sa, 1), first_step(&speaker, 1));
}

#[test]
fn cvae_with_unk_user_rows_matches_vae() {
    let vae = Model::<f64>::new(tiny(Variant::Vae), 15).unwrap();
    let mut cvae = Model::<f64>::new(tiny(Variant::Cvae), 16).unwrap();
    transplant(&vae, &mut cvae);
    assert_eq!(vae.params.len(), cvae.params.len());
    assert_ne!(first_step(&vae, 2), first_step(&cvae, 3));
    let table = cvae.params.get_mut("embed.user").unwrap();
    let d = table.cols();
    let row0 = table.row_slice(0).to_vec();
    for u in 1..4 {
        table.data_mut()[u * d..(u + 1) * d].copy_from_slice(&row0);
    }
    assert_eq!(first_step(&vae, 2), first_step(&cvae, 3));
}

#[test]
fn user_embeddings_receive_gradient() {
    for v in [Variant::PaGenerator, Variant::Cvae, Variant::Speaker] {
        let m = Model::<f64>::new(tiny(v), 17).unwrap();
        let mut net = m.net(true);
        let out = net.forward_train(&batch(), Some(&[0.3; 6])).unwrap();
        let mut loss = net.graph.sum(out.recon).unwrap();
        if let Some(lat) = out.latent {
            let bow = net.graph.sum(lat.bow).unwrap();
            loss = net.graph.add(loss, bow).unwrap();
        }
        let grads = net.graph.backward(loss).unwrap().into_map();
        let g = &grads["embed.user"];
        let d = g.cols();
        for &u in &batch().users {
            assert!(g.row_slice(u).iter().any(|x| *x != 0.0), "{v}: user {u} got no gradient");
        }
        assert_eq!(g.data().len(), 4 * d);
    }
}

#[test]
fn unknown_user_is_a_contract_error() {
    let m = Model::<f64>::new(tiny(Variant::Speaker), 18).unwrap();
    let mut net = m.net(false);
    assert!(matches!(
        net.user_embedding(&[4]),
        Err(ModelError::UnknownUser { index: 4, rows: 4 })
    ));
    let b = Batch {
        users: vec![9, 1],
        ..batch()
    };
    assert!(matches!(net.forward_train(&b, None), Err(ModelError::UnknownUser { .. })));
}

#[test]
fn forward_is_deterministic_given_noise() {
    let m = Model::<f32>::new(tiny(Variant::PaGenerator), 19).unwrap();
    let noise = [0.4f32, -0.1, 0.0, 1.2, -0.7, 0.3];
    let run = || {
        let mut net = m.net(true);
        let out = net.forward_train(&batch(), Some(&noise)).unwrap();
        values(&net, out.recon)
    };
    assert_eq!(run(), run());
}

#[test]
fn parameter_layout_matches_variant() {
    let names = |v| ParameterStore::<f32>::layout(&tiny(v)).into_iter().map(|(n, _)| n).collect::<Vec<_>>();
    assert!(!names(Variant::S2sa).iter().any(|n| n == "embed.user"));
    assert!(names(Variant::FactBias).iter().any(|n| n == "fact.proj"));
    assert!(names(Variant::PaGenerator).iter().any(|n| n == "prior.w"));
    assert!(!names(Variant::Speaker).iter().any(|n| n.starts_with("prior")));
    let mut store = ParameterStore::<f32>::new();
    store.register("a", Tensor::scalar(1.0)).unwrap();
    assert!(matches!(
        store.register("a", Tensor::scalar(2.0)),
        Err(ModelError::DuplicateParameter(_))
    ));
}

#[test]
fn config_text_round_trips() {
    for v in Variant::ALL {
        let cfg = ModelConfig {
            gamma1: 0.25,
            use_r2: false,
            ..ModelConfig::toy(v)
        };
        assert_eq!(ModelConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
    }
    assert!(ModelConfig::from_text("variant=S2SA\nbogus=1\n").is_err());
    assert!("RNN".parse::<Variant>().is_err());
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::toy(Variant::PaGenerator);
    assert!(cfg.validate().is_ok());
    cfg.gamma1 = 0.0;
    assert!(cfg.validate().is_err());
    let mut cfg = ModelConfig::toy(Variant::S2sa);
    cfg.decoder_hidden = 63;
    assert!(cfg.validate().is_err());
    cfg.use_attention = false;
    assert!(cfg.validate().is_ok());
    cfg.z_dim = 0;
    assert!(cfg.validate().is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for v in Variant::ALL {
        let m = Model::<f32>::new(tiny(v), 20).unwrap();
        let path = dir.path().join(format!("{v}.ckpt"));
        m.save(&path).unwrap();
        let loaded = Model::<f32>::load(&path).unwrap();
        assert_eq!(loaded, m);
        assert_eq!(loaded.to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }
}

#[test]
fn checkpoint_header_layout() {
    let m = Model::<f32>::new(tiny(Variant::S2sa), 21).unwrap();
    let bytes = m.to_bytes().unwrap();
    assert_eq!(&bytes[..4], b"PAGN");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, m.params.len());
    // First tensor in name order.
    let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
    assert_eq!(&bytes[14..14 + name_len], m.params.names().next().unwrap().as_bytes());
    assert!(bytes.ends_with(m.config.to_text().as_bytes()));
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let m = Model::<f32>::new(tiny(Variant::S2sa), 22).unwrap();
    let bytes = m.to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(checkpoint::from_bytes::<f32>(&bad), Err(ModelError::Checkpoint(_))));
    assert!(matches!(checkpoint::from_bytes::<f32>(&bytes[..40]), Err(ModelError::Checkpoint(_))));
    let mut other = m.config.clone();
    other.vocab_size = 13;
    let swapped = checkpoint::encode(&m.params, &other.to_text()).unwrap();
    assert!(matches!(checkpoint::from_bytes::<f32>(&swapped), Err(ModelError::Config(_))));
}
