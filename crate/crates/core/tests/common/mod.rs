//! Fixtures shared by the integration and acceptance tests.
#![allow(dead_code)]

use buildout_core::exec::stream_rng;
use buildout_core::model::{TransitionMatrix, N_FREE};
use buildout_core::regime::FeatureVectorSeries;
use buildout_core::synth::SynthSpec;
use rand::Rng;
use rand_distr::StandardNormal;

pub mod oracles;

/// Free parameters of the reference market.
pub const REFERENCE_P: [f64; N_FREE] =
    [0.06, 0.08, 0.03, 0.05, 0.04, 0.02, 0.30, 0.02, 0.03, 0.02, 0.12, 0.04, 0.03, 0.05];

pub const REFERENCE_INITIAL: [u64; 5] = [400, 300, 700, 200, 400];

pub fn reference_matrix(year: i32) -> TransitionMatrix {
    TransitionMatrix::from_free(&REFERENCE_P, year).unwrap()
}

/// 2000 lots starting in 2000 under the reference matrix.
pub fn reference_spec(seed: u64) -> SynthSpec {
    SynthSpec::constant(2000, REFERENCE_INITIAL, 2000, &reference_matrix(2000), seed)
}

pub const REGIME_FIRST_YEAR: i32 = 1985;
pub const REGIME_YEARS: usize = 40;
/// First years of the second and third regimes.
pub const REGIME_SHIFTS: [i32; 2] = [1998, 2011];

/// Parameter levels per regime for the four transitions that move.
pub const REGIME_LEVELS: [(usize, [f64; 3]); 4] =
    [(6, [0.30, 0.12, 0.12]), (10, [0.12, 0.30, 0.30]), (1, [0.08, 0.08, 0.25]), (4, [0.04, 0.20, 0.04])];

/// Reference probabilities with three planted regimes plus Normal noise.
pub fn planted_regimes(seed: u64, noise_sd: f64) -> FeatureVectorSeries {
    let mut rng = stream_rng(seed, 7);
    let mut years = Vec::new();
    let mut vectors = Vec::new();
    for i in 0..REGIME_YEARS {
        let year = REGIME_FIRST_YEAR + i as i32;
        let regime = REGIME_SHIFTS.iter().filter(|&&s| year >= s).count();
        let mut v = REFERENCE_P.to_vec();
        for (k, levels) in REGIME_LEVELS {
            v[k] = levels[regime];
        }
        for x in v.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = (*x + noise_sd * z).clamp(0.0, 1.0);
        }
        years.push(year);
        vectors.push(v);
    }
    FeatureVectorSeries::new(years, vectors).unwrap()
}
