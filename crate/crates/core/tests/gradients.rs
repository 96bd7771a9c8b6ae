//! Finite-difference checks of the training gradients.

mod common;

use bcednet::trainer::Relaxation;
use bcednet::NetConfig;
use common::{fd_check, gradient_batch, gradient_state};

fn tiny() -> NetConfig {
    NetConfig::symmetric(8, 16, 27, 8, 8, 2)
}

#[test]
fn relaxed_gradients_match_finite_differences() {
    let st = gradient_state(tiny(), 1);
    let (imgs, lbls) = gradient_batch(&st.config, 2, 2);
    let n_arrays = st.params.arrays().len();
    let n_latent = st.params.latent.layers.len();
    // Adapter weights, then every γ and β.
    let mut arrays = vec![0];
    arrays.extend(1 + n_latent..n_arrays);
    let (worst, checked) = fd_check(&st, Relaxation::HardTanh, &arrays, &imgs, &lbls);
    println!("{checked} continuous parameters, worst relative error {worst:.2e}");
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn relaxed_latent_gradients_match_finite_differences() {
    let st = gradient_state(tiny(), 3);
    let (imgs, lbls) = gradient_batch(&st.config, 4, 2);
    let n_latent = st.params.latent.layers.len();
    let (worst, checked) = fd_check(&st, Relaxation::HardTanh, &[1, n_latent], &imgs, &lbls);
    println!("{checked} latent weights, worst relative error {worst:.2e}");
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn final_block_gradients_match_in_the_binary_network() {
    let st = gradient_state(tiny(), 5);
    let (imgs, lbls) = gradient_batch(&st.config, 6, 3);
    let n = st.params.arrays().len();
    let blocks = st.params.gamma.len();
    let last_gamma = n - blocks - 1;
    let (worst, checked) = fd_check(&st, Relaxation::Sign, &[last_gamma, n - 1], &imgs, &lbls);
    println!("{checked} final-block parameters, worst relative error {worst:.2e}");
    assert!(worst <= 1e-4, "worst relative error {worst}");
}
