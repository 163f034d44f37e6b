//! Central-difference gradient checks for every tape operation plus the
//! composed selection MLP.

use pointsel::diff::gradient_suite;
use pointsel::select::spe_mlp_gradient_check;

fn main() {
    let mut worst: (f64, String) = (0.0, String::new());
    for (name, rel) in gradient_suite(0) {
        println!("{name:<24} {rel:.2e}");
        if rel > worst.0 {
            worst = (rel, name.to_string());
        }
    }
    let composed = spe_mlp_gradient_check(0);
    println!("{:<24} {composed:.2e}", "spe_mlp (composed)");
    if composed > worst.0 {
        worst = (composed, "spe_mlp".into());
    }
    println!("worst: {} at {:.2e}", worst.1, worst.0);
    assert!(worst.0 < 1e-3);
}
