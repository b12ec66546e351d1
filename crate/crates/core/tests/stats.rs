mod common;

use rand::seq::SliceRandom;
use trajsim::eval::{distort, distorted_count, downsample, hr_at_k};

use common::{random_walk, rng};

#[test]
fn downsampling_keeps_the_expected_fraction() {
    let mut r = rng(11);
    let t = random_walk(&mut r, "t", 202, 50.0);
    let rho = 0.3;
    let trials = 2000;
    let kept: usize = (0..trials).map(|_| downsample(&t, rho, &mut r).unwrap().len()).sum();
    // interior points survive independently with probability 1 - rho
    let interior = 200.0;
    let mean = 2.0 + interior * (1.0 - rho);
    let sd = (interior * rho * (1.0 - rho) / trials as f64).sqrt();
    let got = kept as f64 / trials as f64;
    assert!((got - mean).abs() < 4.0 * sd, "mean kept {got}, expected {mean} +- {}", 4.0 * sd);
}

#[test]
fn distortion_moves_exactly_the_rounded_up_count() {
    let mut r = rng(12);
    for (n, rho, want) in [(10, 0.2, 2), (11, 0.2, 3), (50, 0.5, 25), (7, 0.1, 1)] {
        assert_eq!(distorted_count(n, rho), want);
        let t = random_walk(&mut r, "t", n, 50.0);
        let d = distort(&t, rho, &mut r).unwrap();
        let moved = t.points.iter().zip(&d.points).filter(|(a, b)| a != b).count();
        assert_eq!(moved, want, "n={n} rho={rho}");
    }
}

#[test]
fn random_rankings_hit_at_the_chance_rate() {
    let mut r = rng(13);
    let (n, k, trials) = (100, 5, 10_000);
    let truth: Vec<usize> = (0..n).collect();
    let mut pred = truth.clone();
    let mut sum = 0.0;
    for _ in 0..trials {
        pred.shuffle(&mut r);
        sum += hr_at_k(&pred, &truth, k).unwrap();
    }
    // hits follow a hypergeometric law with mean k/n
    let p = k as f64 / n as f64;
    let var = p * (1.0 - p) * (n - k) as f64 / ((n - 1) as f64 * k as f64);
    let sd = (var / trials as f64).sqrt();
    let got = sum / trials as f64;
    assert!((got - p).abs() < 3.0 * sd, "HR@5 {got}, expected {p} +- {}", 3.0 * sd);
}
