//! Separation metrics, permutation-invariant losses and ideal masks.
//!
//! Log-ratio metrics are clamped to `±METRIC_CAP_DB` so a perfect or a fully
//! orthogonal estimate still yields a finite number.

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codec::Spectrogram;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const METRIC_CAP_DB: f64 = 80.0;

/// Energies below this count as zero inside the log-ratio.
pub const ENERGY_FLOOR: f64 = 1e-30;

/// Denominator floor of the ideal masks.
pub const MASK_FLOOR: f64 = 1e-8;

/// Upper clip of the ideal amplitude mask.
pub const IAM_CLIP: f64 = 10.0;

const DB_PER_NEPER: f64 = 10.0 / std::f64::consts::LN_10;

/// Energies of the projection of an estimate onto a reference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdrDecomposition {
    pub target_energy: f64,
    pub noise_energy: f64,
}

impl SdrDecomposition {
    pub fn db(&self) -> f64 {
        let t = self.target_energy.max(ENERGY_FLOOR);
        let n = self.noise_energy.max(ENERGY_FLOOR);
        (DB_PER_NEPER * (t.ln() - n.ln())).clamp(-METRIC_CAP_DB, METRIC_CAP_DB)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn check_pair(estimate: &[f64], reference: &[f64]) -> Result<()> {
    if estimate.len() != reference.len() {
        return Err(Error::Input(format!(
            "estimate has {} samples, reference has {}",
            estimate.len(),
            reference.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::Input("empty signals".into()));
    }
    Ok(())
}

/// Projects `estimate` onto `reference`, optionally after removing both means.
pub fn decompose(estimate: &[f64], reference: &[f64], zero_mean: bool) -> Result<SdrDecomposition> {
    check_pair(estimate, reference)?;
    let (me, mr) = if zero_mean {
        (mean(estimate), mean(reference))
    } else {
        (0.0, 0.0)
    };
    let e: Vec<f64> = estimate.iter().map(|v| v - me).collect();
    let r: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::Metric(if zero_mean {
            "reference has zero variance".into()
        } else {
            "reference is all zeros".into()
        }));
    }
    let alpha = e.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / rr;
    let (mut target, mut noise) = (0.0, 0.0);
    for (a, b) in e.iter().zip(&r) {
        let t = alpha * b;
        target += t * t;
        noise += (a - t) * (a - t);
    }
    Ok(SdrDecomposition {
        target_energy: target,
        noise_energy: noise,
    })
}

/// Scale-invariant SNR in dB.
pub fn sisnr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(decompose(estimate, reference, true)?.db())
}

/// SDR in the two-term projection form: the Si-SNR projection without mean
/// removal.
pub fn sdr(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    Ok(decompose(estimate, reference, false)?.db())
}

/// Records the Si-SNR (or SDR without `zero_mean`) of a `[1 × T]` estimate
/// against a fixed reference.
pub fn ratio_db_var(tape: &mut Tape, estimate: Var, reference: &[f64], zero_mean: bool) -> Result<Var> {
    let (rows, len) = tape.value(estimate).dims2("sisnr")?;
    if rows != 1 || len != reference.len() {
        return Err(Error::Input(format!(
            "estimate shape [{rows} × {len}] does not match a {}-sample reference",
            reference.len()
        )));
    }
    let mr = if zero_mean { mean(reference) } else { 0.0 };
    let r: Vec<f64> = reference.iter().map(|v| v - mr).collect();
    let rr: f64 = r.iter().map(|v| v * v).sum();
    if rr == 0.0 {
        return Err(Error::Metric("reference has zero energy after centering".into()));
    }
    let e = if zero_mean {
        let m = tape.mean(estimate)?;
        let m = tape.expand(m, &[1, len])?;
        tape.sub(estimate, m)?
    } else {
        estimate
    };
    let r = tape.constant(Tensor::row(&r)?)?;
    let dot = tape.dot(e, r)?;
    let alpha = tape.scale(dot, 1.0 / rr)?;
    let alpha = tape.expand(alpha, &[1, len])?;
    let target = tape.mul(alpha, r)?;
    let noise = tape.sub(e, target)?;
    let energy = |tape: &mut Tape, x: Var| -> Result<Var> {
        let sq = tape.square(x)?;
        let s = tape.sum(sq)?;
        let s = tape.clamp(s, ENERGY_FLOOR, f64::INFINITY)?;
        tape.ln(s)
    };
    let lt = energy(tape, target)?;
    let ln = energy(tape, noise)?;
    let diff = tape.sub(lt, ln)?;
    let db = tape.scale(diff, DB_PER_NEPER)?;
    tape.clamp(db, -METRIC_CAP_DB, METRIC_CAP_DB)
}

pub fn sisnr_var(tape: &mut Tape, estimate: Var, reference: &[f64]) -> Result<Var> {
    ratio_db_var(tape, estimate, reference, true)
}

/// uPIT training criterion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Mean squared error between masked mixture representations and the
    /// reference representations, over `T·F·S` bins.
    UpitMse,
    /// Negative mean Si-SNR of time-domain estimates.
    UpitSisnr,
}

/// The minimizing source-to-reference mapping and its loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationAssignment {
    /// `mapping[s]` is the 0-based reference index matched to estimate `s`.
    pub mapping: Vec<usize>,
    pub loss: f64,
}

impl PermutationAssignment {
    /// 1-based rendering such as `2 1`.
    pub fn label(&self) -> String {
        self.mapping.iter().map(|m| (m + 1).to_string()).join(" ")
    }
}

/// Largest source count accepted by the exhaustive search.
pub const MAX_SOURCES: usize = 6;

/// Exhaustive minimum of `Σ_s cost[s][φ(s)]` over permutations visited in
/// lexicographic order; the first minimum wins ties.
pub fn best_permutation(cost: &[Vec<f64>]) -> Result<PermutationAssignment> {
    let s = cost.len();
    if s == 0 || s > MAX_SOURCES {
        return Err(Error::Input(format!("source count {s} outside 1..={MAX_SOURCES}")));
    }
    if cost.iter().any(|row| row.len() != s) {
        return Err(Error::Input("pairwise cost matrix is not square".into()));
    }
    let mut best: Option<PermutationAssignment> = None;
    for perm in (0..s).permutations(s) {
        let loss: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        if best.as_ref().is_none_or(|b| loss < b.loss) {
            best = Some(PermutationAssignment { mapping: perm, loss });
        }
    }
    Ok(best.expect("at least one permutation"))
}

fn check_counts(estimates: usize, references: usize) -> Result<()> {
    if estimates != references {
        return Err(Error::Input(format!(
            "{estimates} estimates but {references} references"
        )));
    }
    Ok(())
}

/// uPIT with negative mean Si-SNR on time-domain signals.
pub fn upit_sisnr(estimates: &[Vec<f64>], references: &[Vec<f64>]) -> Result<PermutationAssignment> {
    check_counts(estimates.len(), references.len())?;
    let s = estimates.len() as f64;
    let cost = estimates
        .iter()
        .map(|e| references.iter().map(|r| Ok(-sisnr(e, r)? / s)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    best_permutation(&cost)
}

/// uPIT with the masked-magnitude MSE: `(1/B) Σ_s ‖M_s ⊙ |Y| − |X_φ(s)|‖²`
/// with `B = T·F·S`.
pub fn upit_mse(masks: &[Tensor], mixture: &Tensor, references: &[Tensor]) -> Result<PermutationAssignment> {
    check_counts(masks.len(), references.len())?;
    let masked = masks
        .iter()
        .map(|m| {
            if m.shape() != mixture.shape() {
                return Err(Error::dim("upit_mse", "mask and mixture shapes differ"));
            }
            let data = m.data().iter().zip(mixture.data()).map(|(a, b)| a * b).collect();
            Tensor::new(m.shape(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    upit_mse_masked(&masked, references)
}

/// [`upit_mse`] on already-masked representations.
pub fn upit_mse_masked(masked: &[Tensor], references: &[Tensor]) -> Result<PermutationAssignment> {
    check_counts(masked.len(), references.len())?;
    let bins = masked.len() * masked.first().map_or(0, Tensor::numel);
    let cost = masked
        .iter()
        .map(|e| {
            references
                .iter()
                .map(|r| {
                    if r.shape() != e.shape() {
                        return Err(Error::dim("upit_mse", "estimate and reference shapes differ"));
                    }
                    let d: f64 = e.data().iter().zip(r.data()).map(|(a, b)| (a - b) * (a - b)).sum();
                    Ok(d / bins as f64)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    best_permutation(&cost)
}

/// Records the uPIT loss of `estimates` on a tape.
///
/// With [`Criterion::UpitSisnr`] each estimate is a `[1 × T]` signal and
/// each reference a `[1 × T]` var whose value is treated as constant; with
/// [`Criterion::UpitMse`] both are equally shaped representations and the
/// gradient also reaches the references (they depend on trainable encoders).
/// Every pairwise term is recorded, the best permutation is chosen on values
/// and only its terms are summed.
pub fn upit_loss_var(
    tape: &mut Tape,
    estimates: &[Var],
    references: &[Var],
    criterion: Criterion,
) -> Result<(Var, PermutationAssignment)> {
    check_counts(estimates.len(), references.len())?;
    let s = estimates.len();
    let mut terms = vec![Vec::with_capacity(s); s];
    for (i, &e) in estimates.iter().enumerate() {
        for &r in references {
            let term = match criterion {
                Criterion::UpitSisnr => {
                    let reference = tape.value(r).data().to_vec();
                    let db = sisnr_var(tape, e, &reference)?;
                    tape.scale(db, -1.0 / s as f64)?
                }
                Criterion::UpitMse => {
                    if tape.shape(e) != tape.shape(r) {
                        return Err(Error::dim("upit_mse", "estimate and reference shapes differ"));
                    }
                    let bins = s * tape.value(r).numel();
                    let d = tape.sub(e, r)?;
                    let sq = tape.square(d)?;
                    let total = tape.sum(sq)?;
                    tape.scale(total, 1.0 / bins as f64)?
                }
            };
            terms[i].push(term);
        }
    }
    let cost: Vec<Vec<f64>> = terms
        .iter()
        .map(|row| row.iter().map(|v| tape.value(*v).item()).collect())
        .collect();
    let best = best_permutation(&cost)?;
    let mut loss = terms[0][best.mapping[0]];
    for (i, &j) in best.mapping.iter().enumerate().skip(1) {
        loss = tape.add(loss, terms[i][j])?;
    }
    Ok((loss, best))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Iam,
    Ibm,
    Irm,
    Ipsm,
}

impl MaskKind {
    pub const ALL: [MaskKind; 4] = [MaskKind::Iam, MaskKind::Ibm, MaskKind::Irm, MaskKind::Ipsm];

    pub fn name(self) -> &'static str {
        match self {
            MaskKind::Iam => "iam",
            MaskKind::Ibm => "ibm",
            MaskKind::Irm => "irm",
            MaskKind::Ipsm => "ipsm",
        }
    }
}

impl std::str::FromStr for MaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown mask `{s}` (expected iam, ibm, irm or ipsm)")))
    }
}

/// One `[N × F]` oracle mask per source, to be applied to the mixture
/// magnitude.
///
/// * IAM `= |X_s| / |Y|`, clipped to `[0, IAM_CLIP]`
/// * IBM `= 1` where source `s` has the largest magnitude (lowest index on ties)
/// * IRM `= |X_s| / Σ_i |X_i|`
/// * IPSM `= |X_s|·cos(∠Y − ∠X_s) / |Y|`
///
/// Denominators are floored at [`MASK_FLOOR`].
pub fn ideal_mask(kind: MaskKind, sources: &[Spectrogram], mixture: &Spectrogram) -> Result<Vec<Tensor>> {
    if sources.is_empty() {
        return Err(Error::Input("ideal masks need at least one source".into()));
    }
    if sources.iter().any(|s| s.re.shape() != mixture.re.shape()) {
        return Err(Error::dim("ideal_mask", "source and mixture spectrograms differ in shape"));
    }
    let shape = mixture.re.shape().to_vec();
    let mags: Vec<Tensor> = sources.iter().map(Spectrogram::magnitude).collect();
    let mix_mag = mixture.magnitude();
    let y = mix_mag.data();
    let bins = y.len();
    let build = |f: &dyn Fn(usize, usize) -> f64| -> Result<Vec<Tensor>> {
        (0..sources.len())
            .map(|s| Tensor::new(&shape, (0..bins).map(|i| f(s, i)).collect()))
            .collect()
    };
    match kind {
        MaskKind::Iam => build(&|s, i| (mags[s].data()[i] / y[i].max(MASK_FLOOR)).clamp(0.0, IAM_CLIP)),
        MaskKind::Ibm => {
            let winner: Vec<usize> = (0..bins)
                .map(|i| {
                    (1..mags.len()).fold(0, |best, s| {
                        if mags[s].data()[i] > mags[best].data()[i] {
                            s
                        } else {
                            best
                        }
                    })
                })
                .collect();
            build(&|s, i| if winner[i] == s { 1.0 } else { 0.0 })
        }
        MaskKind::Irm => {
            let total: Vec<f64> = (0..bins).map(|i| mags.iter().map(|m| m.data()[i]).sum()).collect();
            build(&|s, i| mags[s].data()[i] / total[i].max(MASK_FLOOR))
        }
        MaskKind::Ipsm => {
            let mix_phase = mixture.phase();
            let phases: Vec<Tensor> = sources.iter().map(Spectrogram::phase).collect();
            build(&|s, i| {
                let delta = mix_phase.data()[i] - phases[s].data()[i];
                mags[s].data()[i] * delta.cos() / y[i].max(MASK_FLOOR)
            })
        }
    }
}
