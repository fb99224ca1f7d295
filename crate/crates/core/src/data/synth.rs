//! Seeded synthetic specimens standing in for laboratory creep tests.
//!
//! Strength is drawn first; modulus and density follow it with scatter.
//! The asymptotic creep falls with strength, modulus and density, and each
//! specimen is "measured" on an irregular schedule with multiplicative and
//! additive noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use super::SpecimenRecord;

fn log_normal(sigma: f64) -> LogNormal<f64> {
    LogNormal::new(0.0, sigma).expect("positive sigma")
}

/// Irregular measurement days: 0, daily through day 7, then roughly weekly
/// until a final day between 160 and 200.
fn schedule(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let end = rng.random_range(160.0..200.0);
    let mut days: Vec<f64> = (0..=7).map(f64::from).collect();
    let mut t: f64 = 7.0;
    while t < end {
        t += 7.0 + rng.random_range(-1.5..1.5);
        days.push((t * 10.0).round() / 10.0);
    }
    days
}

pub fn synth_generate(n_specimens: usize, seed: u64) -> Vec<SpecimenRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let width = n_specimens.max(1).to_string().len();
    (0..n_specimens)
        .map(|i| {
            let fc: f64 = rng.random_range(250.0..550.0);
            let e = 15_100.0 * fc.sqrt() * log_normal(0.06).sample(&mut rng);
            let density = 2200.0 + 0.5 * (fc - 250.0) + 30.0 * unit.sample(&mut rng);

            let a = (900.0
                * (400.0 / fc).powf(0.8)
                * (3.0e5 / e).powf(0.5)
                * (2350.0 / density).powi(2)
                * log_normal(0.15).sample(&mut rng))
            .clamp(200.0, 3000.0);
            let b = rng.random_range(0.08..0.12) * log_normal(0.1).sample(&mut rng);
            let c = (0.75 + 0.1 * unit.sample(&mut rng)).clamp(0.4, 1.2);

            let times = schedule(&mut rng);
            let creeps = times
                .iter()
                .map(|&t| {
                    let clean = a * -(-b * f64::powf(t, c)).exp_m1();
                    let noisy = clean * (1.0 + 0.015 * unit.sample(&mut rng)) + 2.0 * unit.sample(&mut rng);
                    if t == 0.0 { 0.0 } else { noisy.max(0.0) }
                })
                .collect();
            SpecimenRecord {
                id: format!("S{:0width$}", i + 1),
                density: (density * 10.0).round() / 10.0,
                fc: (fc * 10.0).round() / 10.0,
                e: e.round(),
                times,
                creeps,
            }
        })
        .collect()
}
