mod common;

use common::*;

#[test]
fn residual_encoder_gradients_match_finite_differences() {
    println!("{}", check_encoder_gradients(&tiny_residual(8, 4), "residual encoder").unwrap());
}

#[test]
fn vit_encoder_gradients_match_finite_differences() {
    println!("{}", check_encoder_gradients(&tiny_vit(8, 4), "vit encoder").unwrap());
}

#[test]
fn full_icl_gradients_match_finite_differences() {
    println!("{}", check_icl_gradients().unwrap());
}

#[test]
fn combined_pretraining_loss_gradients_match_finite_differences() {
    println!("{}", check_combined_loss_gradients().unwrap());
}
