use super::*;
use crate::loss::{batch_hard_triplet_loss, reconstruction_loss, MarginMode};
use ndarray::Array2;
use rand::Rng;

fn tiny_arch() -> HeadArchitecture {
    HeadArchitecture {
        input_dim: 6,
        hidden_dim: 4,
        embedding_dim: 3,
        nuisance_dim: 2,
        decoder_hidden_dim: 5,
    }
}

fn random_rows(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let mut rng = RngSeed(seed).rng();
    Array2::from_shape_simple_fn((n, d), || rng.random_range(-1.0..1.0))
}

fn cams(ds: &str, ids: &[u32]) -> Vec<CameraKey> {
    ids.iter().map(|&c| CameraKey::new(ds, c)).collect()
}

/// Step-by-step scalar forward of an encoder head.
fn head_oracle(h: &Head, x: &Array2<f64>, train: bool) -> Array2<f64> {
    let (n, f) = x.dim();
    let hid = h.dense1.weight.ncols();
    let out = h.dense2.weight.ncols();
    let mut a = vec![vec![0.0; hid]; n];
    for i in 0..n {
        for j in 0..hid {
            let mut s = h.dense1.bias[j];
            for k in 0..f {
                s += x[[i, k]] * h.dense1.weight[[k, j]];
            }
            a[i][j] = if s > 0.0 { s } else { 0.0 };
        }
    }
    for j in 0..hid {
        let (mean, var) = if train {
            let m = (0..n).map(|i| a[i][j]).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (a[i][j] - m).powi(2)).sum::<f64>() / n as f64;
            (m, v)
        } else {
            (h.bn.running_mean[j], h.bn.running_var[j])
        };
        for row in a.iter_mut() {
            row[j] = h.bn.gamma[j] * (row[j] - mean) / (var + h.bn.eps).sqrt() + h.bn.beta[j];
        }
    }
    let mut y = Array2::zeros((n, out));
    for i in 0..n {
        for j in 0..out {
            let mut s = h.dense2.bias[j];
            for k in 0..hid {
                s += a[i][k] * h.dense2.weight[[k, j]];
            }
            y[[i, j]] = s;
        }
    }
    y
}

fn randomize_bn(h: &mut Head, seed: u64) {
    let mut rng = RngSeed(seed).rng();
    h.bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
    h.bn.beta.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    h.bn.running_mean.mapv_inplace(|_| rng.random_range(0.0..0.5));
    h.bn.running_var.mapv_inplace(|_| rng.random_range(0.5..2.0));
    h.dense1.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
    h.dense2.bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
}

#[test]
fn init_is_deterministic() {
    let a = init_params(tiny_arch(), NuiMode::Shared, &[], RngSeed(3)).unwrap();
    let b = init_params(tiny_arch(), NuiMode::Shared, &[], RngSeed(3)).unwrap();
    let c = init_params(tiny_arch(), NuiMode::Shared, &[], RngSeed(4)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.emb.module.dense1.bias.iter().all(|&v| v == 0.0));
    assert!(a.emb.module.bn.gamma.iter().all(|&v| v == 1.0));
    assert!(a.emb.module.bn.beta.iter().all(|&v| v == 0.0));
}

#[test]
fn per_camera_groups_start_identical() {
    let p = init_params(tiny_arch(), NuiMode::PerCamera, &cams("d", &[0, 1, 2]), RngSeed(1)).unwrap();
    assert_eq!(p.nui.len(), 3);
    let groups: Vec<_> = p.nui.values().collect();
    assert_eq!(groups[0], groups[1]);
    assert_eq!(groups[1], groups[2]);
    assert!(p.nui.contains_key("nui/d/1"));
    assert!(init_params(tiny_arch(), NuiMode::PerCamera, &[], RngSeed(1)).is_err());
    let pd = init_params(tiny_arch(), NuiMode::PerDataset, &[CameraKey::new("a", 0), CameraKey::new("a", 1), CameraKey::new("b", 0)], RngSeed(1)).unwrap();
    assert_eq!(pd.nui.keys().cloned().collect::<Vec<_>>(), ["nui/a", "nui/b"]);
}

#[test]
fn head_parameter_count() {
    let arch = HeadArchitecture::new(1280);
    let mut rng = RngSeed(0).rng();
    let head = Head::init(arch.input_dim, arch.hidden_dim, arch.embedding_dim, &mut rng);
    let formula = 1280 * 1024 + 1024 + 2 * 1024 + 1024 * 128 + 128;
    assert_eq!(head.parameter_count(), formula);
    let enumerated: usize = head
        .tensor_names()
        .iter()
        .map(|n| head.get(n).unwrap().0.len())
        .sum();
    assert_eq!(enumerated, formula);
}

#[test]
fn encode_id_matches_scalar_oracle() {
    let mut p = init_params(tiny_arch(), NuiMode::Shared, &[], RngSeed(5)).unwrap();
    randomize_bn(&mut p.emb.module, 6);
    let x = random_rows(7, 5, 6);
    for (mode, train) in [(BnMode::Train, true), (BnMode::Eval, false)] {
        let got = p.encode_id(x.view(), mode).unwrap();
        let want = head_oracle(&p.emb.module, &x, train);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn encode_id_eval_is_row_wise() {
    let mut p = init_params(tiny_arch(), NuiMode::Shared, &[], RngSeed(5)).unwrap();
    randomize_bn(&mut p.emb.module, 8);
    let x = random_rows(9, 6, 6);
    let full = p.encode_id(x.view(), BnMode::Eval).unwrap();
    let perm = [3usize, 0, 5, 1, 4, 2];
    let xp = x.select(Axis(0), &perm);
    let outp = p.encode_id(xp.view(), BnMode::Eval).unwrap();
    for (i, &src) in perm.iter().enumerate() {
        assert_eq!(outp.row(i), full.row(src));
    }
    for i in 0..6 {
        let one = p.encode_id(x.slice(ndarray::s![i..i + 1, ..]), BnMode::Eval).unwrap();
        for (a, b) in one.row(0).iter().zip(full.row(i).iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    assert!(p.encode_id(random_rows(1, 2, 5).view(), BnMode::Eval).is_err());
}

#[test]
fn zero_network_outputs_zero() {
    let arch = tiny_arch();
    let mut p = init_params(arch, NuiMode::Shared, &[], RngSeed(5)).unwrap();
    p.emb.module = Head::zeros(6, 4, 3);
    p.dec.module = Decoder::zeros(5, 5, 6);
    let x = random_rows(1, 4, 6);
    assert!(p.encode_id(x.view(), BnMode::Train).unwrap().iter().all(|&v| v == 0.0));
    assert!(p.encode_id(x.view(), BnMode::Eval).unwrap().iter().all(|&v| v == 0.0));
    let z = random_rows(2, 4, 3);
    let zn = random_rows(3, 4, 2);
    assert!(p.decode(z.view(), zn.view()).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn decode_matches_oracle_and_respects_concat_order() {
    let arch = HeadArchitecture {
        input_dim: 4,
        hidden_dim: 3,
        embedding_dim: 3,
        nuisance_dim: 3,
        decoder_hidden_dim: 5,
    };
    let p = init_params(arch, NuiMode::Shared, &[], RngSeed(11)).unwrap();
    let zi = random_rows(12, 3, 3);
    let zn = random_rows(13, 3, 3);
    let got = p.decode(zi.view(), zn.view()).unwrap();
    let swapped = p.decode(zn.view(), zi.view()).unwrap();
    assert_ne!(got, swapped);

    let d = &p.dec.module;
    for i in 0..3 {
        let z: Vec<f64> = zi.row(i).iter().chain(zn.row(i).iter()).copied().collect();
        let mut h = [0.0; 5];
        for (j, hj) in h.iter_mut().enumerate() {
            let mut s = d.dense1.bias[j];
            for (k, zk) in z.iter().enumerate() {
                s += zk * d.dense1.weight[[k, j]];
            }
            *hj = s.max(0.0);
        }
        for j in 0..4 {
            let mut s = d.dense2.bias[j];
            for (k, hk) in h.iter().enumerate() {
                s += hk * d.dense2.weight[[k, j]];
            }
            assert!((got[[i, j]] - s).abs() < 1e-10);
        }
    }
    assert!(p.decode(zi.view(), random_rows(1, 2, 3).view()).is_err());
}

#[test]
fn nui_registry_behaviour() {
    let shared = init_params(tiny_arch(), NuiMode::Shared, &[], RngSeed(2)).unwrap();
    let x = random_rows(4, 5, 6);
    let a = shared.encode_nui(x.view(), Some(&CameraKey::new("d", 0)), BnMode::Eval).unwrap();
    let b = shared.encode_nui(x.view(), Some(&CameraKey::new("d", 1)), BnMode::Eval).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, shared.encode_nui(x.view(), None, BnMode::Eval).unwrap());

    let per = init_params(tiny_arch(), NuiMode::PerCamera, &cams("d", &[0, 1]), RngSeed(2)).unwrap();
    let a = per.encode_nui(x.view(), Some(&CameraKey::new("d", 0)), BnMode::Eval).unwrap();
    let b = per.encode_nui(x.view(), Some(&CameraKey::new("d", 1)), BnMode::Eval).unwrap();
    assert_eq!(a, b);
    let err = per.encode_nui(x.view(), Some(&CameraKey::new("d", 7)), BnMode::Eval);
    assert!(matches!(err, Err(Error::Registry(_))));
    assert!(per.encode_nui(x.view(), None, BnMode::Eval).is_err());
}

fn sgd(p: &mut ParamSet, grads: &Gradients, lr: f64) {
    for (group, name, g) in grads.iter() {
        let t = p.tensor_mut(group, name).unwrap();
        for (v, gv) in t.iter_mut().zip(g) {
            *v -= lr * gv;
        }
    }
}

#[test]
fn one_step_on_one_camera_leaves_others_untouched() {
    let mut p = init_params(tiny_arch(), NuiMode::PerCamera, &cams("d", &[0, 1]), RngSeed(2)).unwrap();
    p.emb.frozen = true;
    p.dec.frozen = true;
    let x = random_rows(5, 6, 6);
    let before1 = p.nui["nui/d/1"].clone();
    let k0 = CameraKey::new("d", 0);
    let out0 = p.encode_nui(x.view(), Some(&k0), BnMode::Eval).unwrap();
    let eval = reconstruction_gradients(&p, x.view(), &vec![k0.clone(); 6]).unwrap();
    assert_eq!(eval.grads.group_names().collect::<Vec<_>>(), ["nui/d/0"]);
    sgd(&mut p, &eval.grads, 0.1);
    p.apply_bn_stats(&eval.bn_stats);
    assert_eq!(p.nui["nui/d/1"], before1);
    assert_ne!(p.encode_nui(x.view(), Some(&k0), BnMode::Eval).unwrap(), out0);
}

#[test]
fn zero_loss_has_zero_gradients_and_frozen_groups_are_absent() {
    let mut p = init_params(tiny_arch(), NuiMode::Shared, &[], RngSeed(2)).unwrap();
    p.dec.module = Decoder::zeros(5, 5, 6);
    let x = Array2::zeros((4, 6));
    let eval = reconstruction_gradients(&p, x.view(), &cams("d", &[0, 0, 1, 1])).unwrap();
    assert_eq!(eval.loss, 0.0);
    assert!(eval.grads.iter().all(|(_, _, g)| g.iter().all(|&v| v == 0.0)));

    let mut p = init_params(tiny_arch(), NuiMode::Shared, &[], RngSeed(2)).unwrap();
    p.emb.frozen = true;
    let x = random_rows(3, 4, 6);
    let eval = reconstruction_gradients(&p, x.view(), &cams("d", &[0, 0, 1, 1])).unwrap();
    assert!(!eval.grads.contains_group(EMB));
    assert!(eval.grads.contains_group(DEC));
    assert!(eval.bn_stats.iter().all(|(g, _)| g != EMB));
    let t = triplet_gradients(&p, x.view(), &[0, 0, 1, 1], MarginMode::Softplus).unwrap();
    assert!(t.grads.is_empty());

    p.set_frozen(DEC, true).unwrap();
    p.set_frozen(NUI, true).unwrap();
    let eval = reconstruction_gradients(&p, x.view(), &cams("d", &[0, 0, 1, 1])).unwrap();
    assert!(eval.grads.is_empty());
}

/// Central finite differences of `loss` over every trainable entry.
fn fd_check(p: &ParamSet, analytic: &Gradients, loss: impl Fn(&ParamSet) -> f64) -> f64 {
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut q = p.clone();
    for (group, name, g) in analytic.iter() {
        for i in 0..g.len() {
            let orig = q.tensor(group, name).unwrap().0[i];
            q.tensor_mut(group, name).unwrap()[i] = orig + h;
            let up = loss(&q);
            q.tensor_mut(group, name).unwrap()[i] = orig - h;
            let down = loss(&q);
            q.tensor_mut(group, name).unwrap()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let rel = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut p = init_params(tiny_arch(), NuiMode::PerCamera, &cams("d", &[0, 1]), RngSeed(21)).unwrap();
    randomize_bn(&mut p.emb.module, 22);
    let x = random_rows(23, 8, 6);
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];
    let keys = cams("d", &[0, 1, 0, 1, 0, 1, 0, 1]);

    let t = triplet_gradients(&p, x.view(), &labels, MarginMode::Softplus).unwrap();
    let worst = fd_check(&p, &t.grads, |q| {
        let z = q.encode_id(x.view(), BnMode::Train).unwrap();
        batch_hard_triplet_loss(z.view(), &labels, MarginMode::Softplus).unwrap()
    });
    assert!(worst <= 1e-4, "triplet worst relative error {worst}");

    let r = reconstruction_gradients(&p, x.view(), &keys).unwrap();
    assert_eq!(r.grads.group_names().count(), 4);
    let worst = fd_check(&p, &r.grads, |q| {
        let zi = q.encode_id(x.view(), BnMode::Train).unwrap();
        let mut zn = Array2::zeros((8, 2));
        for cam in [0u32, 1] {
            let rows: Vec<usize> = (0..8).filter(|&i| keys[i].camera == cam).collect();
            let sub = x.select(Axis(0), &rows);
            let out = q.encode_nui(sub.view(), Some(&CameraKey::new("d", cam)), BnMode::Train).unwrap();
            for (j, &r) in rows.iter().enumerate() {
                zn.row_mut(r).assign(&out.row(j));
            }
        }
        let recon = q.decode(zi.view(), zn.view()).unwrap();
        reconstruction_loss(recon.view(), x.view()).unwrap()
    });
    assert!(worst <= 1e-4, "reconstruction worst relative error {worst}");
}

#[test]
fn bn_stats_update_only_trainable_groups() {
    let mut p = init_params(tiny_arch(), NuiMode::Shared, &[], RngSeed(2)).unwrap();
    let x = random_rows(3, 5, 6);
    let eval = reconstruction_gradients(&p, x.view(), &cams("d", &[0; 5])).unwrap();
    let before = p.clone();
    p.emb.frozen = true;
    p.apply_bn_stats(&eval.bn_stats);
    assert_eq!(p.emb.module.bn, before.emb.module.bn);
    assert_ne!(p.nui[NUI].module.bn, before.nui[NUI].module.bn);
}
