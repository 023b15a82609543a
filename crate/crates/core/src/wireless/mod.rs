//! Channel, delay and bandwidth models.
//!
//! Everything inside this module works in linear SI units (W, Hz, s, bits).
//! dBm and dB appear only on [`RadioProfile`] fields and are converted on use.

mod lambert;

pub use lambert::{lambert_w0, lambert_wm1};

use std::collections::BTreeMap;
use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::{seed, ClientId};

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Uplink radio parameters of one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioProfile {
    pub tx_power_dbm: f64,
    pub distance_km: f64,
    pub shadow_sigma_db: f64,
    pub noise_psd_dbm_hz: f64,
    pub carrier_ghz: f64,
}

impl RadioProfile {
    pub fn tx_power_watts(&self) -> f64 {
        dbm_to_watts(self.tx_power_dbm)
    }

    pub fn noise_psd_watts(&self) -> f64 {
        dbm_to_watts(self.noise_psd_dbm_hz)
    }
}

/// Shifted-exponential computation delay parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComputeProfile {
    /// `a_n`, seconds per sample.
    pub min_time_per_sample: f64,
    /// `μ_n`, samples per second.
    pub rate_param: f64,
}

/// Average channel power gain `|H̄|²` (linear).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelRealization {
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkBudget {
    /// `D_s`, bits per model upload.
    pub model_bits: f64,
    /// `T_max`, seconds.
    pub deadline: f64,
    /// `B`, Hz.
    pub total_bandwidth: f64,
}

/// `128.1 + 37.6·log10(d_km)` dB.
pub fn path_loss_db(distance_km: f64) -> f64 {
    128.1 + 37.6 * distance_km.log10()
}

/// Path loss plus log-normal shadowing drawn from `rng_seed`.
pub fn path_gain(profile: &RadioProfile, rng_seed: u64) -> ChannelRealization {
    let shadow = if profile.shadow_sigma_db > 0.0 {
        let normal = Normal::new(0.0, profile.shadow_sigma_db).expect("finite sigma");
        normal.sample(&mut seed::rng(rng_seed))
    } else {
        0.0
    };
    ChannelRealization { gain: 10f64.powf(-(path_loss_db(profile.distance_km) + shadow) / 10.0) }
}

/// Distance of a point drawn uniformly in a disc of `radius_m` metres, in km.
pub fn draw_distance_km(radius_m: f64, rng_seed: u64) -> f64 {
    // u in (0, 1] keeps the distance strictly positive
    let u = 1.0 - seed::rng(rng_seed).random::<f64>();
    radius_m * u.sqrt() / 1000.0
}

/// Inverse CDF of the computation delay: `aτb − (τb/μ)·ln(1 − u)`.
pub fn compute_delay_quantile(profile: &ComputeProfile, tau: usize, batch: usize, u: f64) -> f64 {
    let work = (tau * batch) as f64;
    profile.min_time_per_sample * work - work / profile.rate_param * (-u).ln_1p()
}

/// `P[t < x]` for the shifted-exponential delay.
pub fn compute_delay_cdf(profile: &ComputeProfile, tau: usize, batch: usize, x: f64) -> f64 {
    let work = (tau * batch) as f64;
    let shift = profile.min_time_per_sample * work;
    if x < shift {
        0.0
    } else {
        -(-(profile.rate_param / work) * (x - shift)).exp_m1()
    }
}

pub fn sample_compute_delay(profile: &ComputeProfile, tau: usize, batch: usize, rng_seed: u64) -> f64 {
    let u: f64 = seed::rng(rng_seed).random();
    compute_delay_quantile(profile, tau, batch, u)
}

/// Shannon rate `B·log2(1 + P|H|²/(B·N0))` in bits/s.
pub fn shannon_rate(bandwidth: f64, profile: &RadioProfile, channel: &ChannelRealization) -> f64 {
    let snr = profile.tx_power_watts() * channel.gain / (bandwidth * profile.noise_psd_watts());
    bandwidth * snr.ln_1p() / LN_2
}

pub fn transmission_time(bandwidth: f64, profile: &RadioProfile, channel: &ChannelRealization, budget: &LinkBudget) -> f64 {
    budget.model_bits / shannon_rate(bandwidth, profile, channel)
}

/// `Γ = N0·D_s·ln2 / (t·P·|H|²)`. Uploading within `t` is possible at some
/// finite bandwidth iff `Γ < 1` (the rate saturates at `P|H|²/(N0 ln2)`).
pub fn gamma(remaining_time: f64, profile: &RadioProfile, channel: &ChannelRealization, budget: &LinkBudget) -> f64 {
    profile.noise_psd_watts() * budget.model_bits * LN_2
        / (remaining_time * profile.tx_power_watts() * channel.gain)
}

/// Smallest bandwidth that uploads the model in exactly `remaining_time`:
/// `B* = −D_s ln2 / (t·(W_{−1}(−Γe^{−Γ}) + Γ))`.
///
/// `−Γe^{−Γ}` has the trivial preimage `−Γ` on one branch; the bandwidth
/// comes from the other one, which is `W_{−1}` because `Γ < 1`.
pub fn min_bandwidth(
    remaining_time: f64,
    profile: &RadioProfile,
    channel: &ChannelRealization,
    budget: &LinkBudget,
) -> Result<f64> {
    if !(remaining_time > 0.0) || !remaining_time.is_finite() {
        return Err(Error::InfeasibleClient(format!(
            "no time left for upload (remaining {remaining_time} s)"
        )));
    }
    let g = gamma(remaining_time, profile, channel, budget);
    if !(g < 1.0) {
        return Err(Error::InfeasibleClient(format!(
            "upload cannot finish in {remaining_time} s at any bandwidth (gamma = {g})"
        )));
    }
    let w = lambert_wm1(-g * (-g).exp()).expect("argument lies in [-1/e, 0)");
    let b = -budget.model_bits * LN_2 / (remaining_time * (w + g));
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::InfeasibleClient(format!("bandwidth diverges (gamma = {g})")));
    }
    Ok(b)
}

/// [`min_bandwidth`] for a client whose computation takes `compute_delay`,
/// rounded up until `compute_delay + upload ≤ deadline` holds in floating point.
pub fn allocate_bandwidth(
    compute_delay: f64,
    profile: &RadioProfile,
    channel: &ChannelRealization,
    budget: &LinkBudget,
) -> Result<f64> {
    let mut b = min_bandwidth(budget.deadline - compute_delay, profile, channel, budget)?;
    for _ in 0..64 {
        if compute_delay + transmission_time(b, profile, channel, budget) <= budget.deadline {
            return Ok(b);
        }
        b *= 1.0 + 1e-12;
    }
    Err(Error::InfeasibleClient("bandwidth rounding did not settle".into()))
}

/// Synchronous round delay: the slowest selected client's compute plus upload time.
pub fn round_delay(
    selected: &[ClientId],
    compute_delays: &BTreeMap<ClientId, f64>,
    bandwidths: &BTreeMap<ClientId, f64>,
    profiles: &BTreeMap<ClientId, RadioProfile>,
    channels: &BTreeMap<ClientId, ChannelRealization>,
    budget: &LinkBudget,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for id in selected {
        let missing = |what: &str| invalid(format!("client {id} has no {what}"));
        let cp = compute_delays.get(id).ok_or_else(|| missing("compute delay"))?;
        let b = bandwidths.get(id).ok_or_else(|| missing("bandwidth"))?;
        let p = profiles.get(id).ok_or_else(|| missing("radio profile"))?;
        let h = channels.get(id).ok_or_else(|| missing("channel"))?;
        worst = worst.max(cp + transmission_time(*b, p, h, budget));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn radio(d: f64) -> RadioProfile {
        RadioProfile { tx_power_dbm: 23.0, distance_km: d, shadow_sigma_db: 0.0, noise_psd_dbm_hz: -174.0, carrier_ghz: 3.5 }
    }

    fn budget() -> LinkBudget {
        LinkBudget { model_bits: 1.8e7, deadline: 1.0, total_bandwidth: 20e6 }
    }

    #[test]
    fn path_loss_examples() {
        assert_eq!(path_loss_db(1.0), 128.1);
        assert!((path_gain(&radio(1.0), 0).gain - 10f64.powf(-12.81)).abs() < 1e-27);
        assert!((path_loss_db(0.1) - 90.5).abs() < 1e-12);
        let shadowed = RadioProfile { shadow_sigma_db: 8.0, ..radio(0.2) };
        assert_eq!(path_gain(&shadowed, 5), path_gain(&shadowed, 5));
        assert_ne!(path_gain(&shadowed, 5), path_gain(&shadowed, 6));
    }

    #[test]
    fn distances_stay_in_disc() {
        for s in 0..1000 {
            let d = draw_distance_km(250.0, s);
            assert!(d > 0.0 && d <= 0.25);
        }
    }

    #[test]
    fn compute_delay_support() {
        let p = ComputeProfile { min_time_per_sample: 5e-4, rate_param: 2000.0 };
        assert_eq!(compute_delay_quantile(&p, 1, 32, 0.0), 5e-4 * 32.0);
        for s in 0..200 {
            assert!(sample_compute_delay(&p, 2, 32, s) >= 5e-4 * 64.0);
        }
        assert_eq!(compute_delay_cdf(&p, 1, 32, 0.01), 0.0);
        let t = compute_delay_quantile(&p, 1, 32, 0.3);
        assert!((compute_delay_cdf(&p, 1, 32, t) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn shannon_rate_unit_snr() {
        let r = radio(0.1);
        let n0 = r.noise_psd_watts();
        let b = 1e6;
        let h = ChannelRealization { gain: b * n0 / r.tx_power_watts() };
        assert!((shannon_rate(b, &r, &h) - b).abs() < 1e-6);
    }

    #[test]
    fn shannon_rate_is_strictly_concave_spot_check() {
        let mut rng = seed::rng(17);
        for _ in 0..100 {
            let r = RadioProfile { tx_power_dbm: rng.random_range(0.0..30.0), ..radio(1.0) };
            let h = ChannelRealization { gain: 10f64.powf(rng.random_range(-14.0..-8.0)) };
            let b = 10f64.powf(rng.random_range(3.0..8.0));
            let (r1, r2) = (shannon_rate(b, &r, &h), shannon_rate(2.0 * b, &r, &h));
            assert!(r2 > r1 && r2 < 2.0 * r1);
        }
    }

    fn bisect_bandwidth(remaining: f64, r: &RadioProfile, h: &ChannelRealization, bud: &LinkBudget) -> Option<f64> {
        let f = |b: f64| bud.model_bits / shannon_rate(b, r, h) - remaining;
        let mut hi = 10.0 * bud.total_bandwidth;
        while f(hi) > 0.0 {
            hi *= 2.0;
            if hi > 1e40 {
                return None;
            }
        }
        let mut lo = 1e-9;
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some(0.5 * (lo + hi))
    }

    #[test]
    fn min_bandwidth_meets_deadline_exactly() {
        let bud = budget();
        for (d, t) in [(0.05, 0.9), (0.2, 0.5), (0.25, 0.95), (0.1, 0.05)] {
            let r = radio(d);
            let h = path_gain(&r, 0);
            let b = min_bandwidth(t, &r, &h, &bud).unwrap();
            let tx = transmission_time(b, &r, &h, &bud);
            assert!((tx / t - 1.0).abs() <= 1e-6, "d={d} t={t}");
            let oracle = bisect_bandwidth(t, &r, &h, &bud).unwrap();
            assert!((b / oracle - 1.0).abs() <= 1e-6);
            let halved = min_bandwidth(t / 2.0, &r, &h, &bud).unwrap();
            assert!(halved > b);
        }
    }

    #[test]
    fn min_bandwidth_infeasible_cases() {
        let bud = budget();
        let r = radio(0.2);
        let h = path_gain(&r, 0);
        assert!(matches!(min_bandwidth(0.0, &r, &h, &bud), Err(Error::InfeasibleClient(_))));
        assert!(matches!(min_bandwidth(-0.1, &r, &h, &bud), Err(Error::InfeasibleClient(_))));
        let weak = ChannelRealization { gain: 1e-20 };
        assert!(gamma(0.5, &r, &weak, &bud) > 1.0);
        assert!(matches!(min_bandwidth(0.5, &r, &weak, &bud), Err(Error::InfeasibleClient(_))));
        assert!(bisect_bandwidth(0.5, &r, &weak, &bud).is_none());
    }

    #[test]
    fn allocation_respects_deadline_in_floating_point() {
        let bud = budget();
        let mut rng = seed::rng(4);
        for s in 0..500 {
            let r = RadioProfile { shadow_sigma_db: 8.0, ..radio(draw_distance_km(250.0, s)) };
            let h = path_gain(&r, s);
            let cp = rng.random_range(0.01..0.9);
            if let Ok(b) = allocate_bandwidth(cp, &r, &h, &bud) {
                assert!(cp + transmission_time(b, &r, &h, &bud) <= bud.deadline);
            }
        }
    }

    #[test]
    fn round_delay_examples() {
        let bud = budget();
        let ids: Vec<ClientId> = (0..3).map(ClientId).collect();
        let r = radio(0.1);
        let h = path_gain(&r, 0);
        let mut cp = BTreeMap::new();
        let mut bw = BTreeMap::new();
        let mut pr = BTreeMap::new();
        let mut ch = BTreeMap::new();
        for (i, t) in ids.iter().zip([0.3, 0.9, 0.7]) {
            // allocate so the upload takes 0.05 s; totals become 0.35, 0.95, 0.75
            bw.insert(*i, min_bandwidth(0.05, &r, &h, &bud).unwrap());
            cp.insert(*i, t);
            pr.insert(*i, r);
            ch.insert(*i, h);
        }
        let d = round_delay(&ids, &cp, &bw, &pr, &ch, &bud).unwrap();
        assert!((d - 0.95).abs() < 1e-7);
        let single = round_delay(&ids[..1], &cp, &bw, &pr, &ch, &bud).unwrap();
        assert!((single - 0.35).abs() < 1e-7);
        assert!(round_delay(&[ClientId(9)], &cp, &bw, &pr, &ch, &bud).is_err());

        for i in &ids {
            bw.insert(*i, min_bandwidth(bud.deadline - cp[i], &r, &h, &bud).unwrap());
        }
        let d = round_delay(&ids, &cp, &bw, &pr, &ch, &bud).unwrap();
        assert!((d / bud.deadline - 1.0).abs() <= 1e-6);
    }
}
