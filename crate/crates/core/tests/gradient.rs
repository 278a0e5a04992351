mod common;

use common::{grad_config as config, grad_setup as setup};
use splade_lab::encoder::EncoderParams;
use splade_lab::train::{batch_gradient, batch_loss, Batch};

fn check(params: &EncoderParams, mask: Option<&[bool]>, batch: &Batch, lq: f64, ld: f64) {
    let (_, g) = batch_gradient(params, mask, batch, lq, ld).unwrap();
    let loss = |p: &EncoderParams| batch_loss(p, mask, batch, lq, ld).unwrap().total;
    let (live, dead) = common::finite_difference_probes(params, &g, loss, 50, 20, 1e-5, 1e-5, 4);
    for p in &live {
        assert!(p.rel_err() < 1e-4, "{p:?} rel err {}", p.rel_err());
    }
    for p in &dead {
        assert!(p.numeric.abs() < 1e-8, "{p:?}");
    }
}

#[test]
fn sparse_tied_gradient_matches_finite_differences() {
    let (_, batch, c, _) = setup("full");
    let p = EncoderParams::init_sparse(config(true), &c, 21).unwrap();
    check(&p, Some(&c.allowed_mask()), &batch, 0.05, 0.1);
}

#[test]
fn sparse_untied_latent_gradient_matches_finite_differences() {
    let (_, batch, c, _) = setup("added_latent_k:20");
    let p = EncoderParams::init_sparse(config(false), &c, 22).unwrap();
    check(&p, Some(&c.allowed_mask()), &batch, 0.05, 0.1);
}

#[test]
fn restricted_mask_gradient_matches_finite_differences() {
    let (_, batch, c, _) = setup("random_k:15");
    let p = EncoderParams::init_sparse(config(true), &c, 23).unwrap();
    check(&p, Some(&c.allowed_mask()), &batch, 0.0, 0.2);
}

#[test]
fn dense_gradient_matches_finite_differences() {
    let (_, batch, _, base) = setup("full");
    let p = EncoderParams::init_dense(config(true), base, 24).unwrap();
    check(&p, None, &batch, 0.0, 0.0);
}
