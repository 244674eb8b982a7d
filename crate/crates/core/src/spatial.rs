//! Inter-microphone phase difference (IPD) features.
//!
//! IPDs are taken from STFT phases computed with the same window length and
//! hop as the separator's encoder, so spatial and spectral features share a
//! frame grid. Raw IPDs are never wrapped; only their cosine and sine enter
//! the network.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, ParamStore, Tape, Var};
use crate::codec::{Codec, Stft};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered microphone pairs, 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, usize)>", into = "Vec<(usize, usize)>")]
pub struct PairSet(Vec<(usize, usize)>);

impl PairSet {
    pub fn new(pairs: Vec<(usize, usize)>) -> Result<Self> {
        for &(a, b) in &pairs {
            if a == 0 || b == 0 {
                return Err(Error::Config(format!("pair ({a}, {b}): indices are 1-based")));
            }
            if a == b {
                return Err(Error::Config(format!("pair ({a}, {b}) repeats a microphone")));
            }
        }
        Ok(PairSet(pairs))
    }

    /// Pairs used with the spatialized WSJ0-2mix recipe.
    pub fn wsj0() -> Self {
        PairSet(vec![(1, 4), (2, 5), (3, 6), (1, 2), (3, 4), (5, 6)])
    }

    /// Pairs used with the LibriSpeech-2mix recipe.
    pub fn librispeech() -> Self {
        PairSet(vec![(1, 4), (2, 5), (3, 6), (2, 6), (3, 5), (1, 6), (4, 5)])
    }

    pub fn empty() -> Self {
        PairSet(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.0
    }

    /// Highest microphone index referenced, 0 when empty.
    pub fn max_index(&self) -> usize {
        self.0.iter().map(|&(a, b)| a.max(b)).max().unwrap_or(0)
    }

    /// Channel-width multiplier of [`assemble_features`]: `1 + 2·pairs`.
    pub fn width_multiplier(&self) -> usize {
        1 + 2 * self.len()
    }

    pub fn check_channels(&self, channels: usize) -> Result<()> {
        match self.0.iter().find(|&&(a, b)| a > channels || b > channels) {
            Some(&(a, b)) => Err(Error::Config(format!(
                "pair ({a}, {b}) is out of range for {channels} channels"
            ))),
            None => Ok(()),
        }
    }
}

impl TryFrom<Vec<(usize, usize)>> for PairSet {
    type Error = Error;

    fn try_from(pairs: Vec<(usize, usize)>) -> Result<Self> {
        PairSet::new(pairs)
    }
}

impl From<PairSet> for Vec<(usize, usize)> {
    fn from(p: PairSet) -> Self {
        p.0
    }
}

/// Plain IPD features, one `[N × F]` tensor per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFeatures {
    pub ipd: Vec<Tensor>,
    pub cos_ipd: Vec<Tensor>,
    pub sin_ipd: Vec<Tensor>,
}

impl SpatialFeatures {
    pub fn num_pairs(&self) -> usize {
        self.ipd.len()
    }

    /// Frame count, `None` without pairs.
    pub fn frames(&self) -> Option<usize> {
        self.ipd.first().map(|t| t.shape()[1])
    }
}

/// IPD features recorded on a tape, one `[N × F]` var per pair.
#[derive(Clone, Debug)]
pub struct SpatialVars {
    pub ipd: Vec<Var>,
    pub cos_ipd: Vec<Var>,
    pub sin_ipd: Vec<Var>,
}

/// Records `phase[u1] − phase[u2]` and its cosine and sine for every pair.
pub fn ipd_vars(tape: &mut Tape, phases: &[Var], pairs: &PairSet) -> Result<SpatialVars> {
    pairs.check_channels(phases.len())?;
    if let Some(first) = phases.first() {
        let shape = tape.shape(*first).to_vec();
        if phases.iter().any(|p| tape.shape(*p) != shape.as_slice()) {
            return Err(Error::Alignment("channel phases differ in shape".into()));
        }
    }
    let mut out = SpatialVars {
        ipd: Vec::with_capacity(pairs.len()),
        cos_ipd: Vec::with_capacity(pairs.len()),
        sin_ipd: Vec::with_capacity(pairs.len()),
    };
    for &(a, b) in pairs.pairs() {
        let d = tape.sub(phases[a - 1], phases[b - 1])?;
        out.cos_ipd.push(tape.cos(d)?);
        out.sin_ipd.push(tape.sin(d)?);
        out.ipd.push(d);
    }
    Ok(out)
}

/// IPD features from per-channel `[N × F]` phase tensors.
pub fn ipd(phases: &[Tensor], pairs: &PairSet) -> Result<SpatialFeatures> {
    let mut tape = Tape::new();
    let vars = phases
        .iter()
        .map(|p| tape.constant(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let sv = ipd_vars(&mut tape, &vars, pairs)?;
    Ok(collect(&tape, &sv))
}

fn collect(tape: &Tape, sv: &SpatialVars) -> SpatialFeatures {
    let values = |vars: &[Var]| vars.iter().map(|v| tape.value(*v).clone()).collect();
    SpatialFeatures {
        ipd: values(&sv.ipd),
        cos_ipd: values(&sv.cos_ipd),
        sin_ipd: values(&sv.sin_ipd),
    }
}

/// IPD features straight from a `[C × T]` waveform through the STFT kernels:
/// each channel's phase is `atan2(y ⊛ K_im, y ⊛ K_re)`.
pub fn ipd_from_waveform(channels: &Tensor, stft: &Stft, pairs: &PairSet) -> Result<SpatialFeatures> {
    let (c, t) = channels.dims2("ipd_from_waveform")?;
    pairs.check_channels(c)?;
    stft.config().num_frames(t)?;
    let (kre, kim) = stft.kernels()?;
    let mut tape = Tape::new();
    let kre = tape.constant(kre)?;
    let kim = tape.constant(kim)?;
    let spec = ConvSpec::stride(stft.config().hop);
    let mut phases = Vec::with_capacity(c);
    for ch in 0..c {
        let y = tape.constant(Tensor::row(channels.row_slice(ch))?)?;
        let re = tape.conv1d(y, kre, spec)?;
        let im = tape.conv1d(y, kim, spec)?;
        phases.push(tape.atan2(im, re)?);
    }
    let sv = ipd_vars(&mut tape, &phases, pairs)?;
    Ok(collect(&tape, &sv))
}

/// Records per-channel STFT phases of a `[C × T]` var with a spectrogram
/// codec, for the multi-channel pipelines.
pub fn channel_phases(
    tape: &mut Tape,
    codec: &Codec,
    store: &ParamStore,
    channels: &[Var],
) -> Result<Vec<Var>> {
    let (kre, kim) = codec.stft_kernels(tape, store)?;
    let spec = ConvSpec::stride(codec.config().hop);
    channels
        .iter()
        .map(|&y| {
            let re = tape.conv1d(y, kre, spec)?;
            let im = tape.conv1d(y, kim, spec)?;
            tape.atan2(im, re)
        })
        .collect()
}

/// Channel-axis concatenation `[primary | cos pairs | sin pairs]`.
pub fn assemble_vars(tape: &mut Tape, primary: Var, spatial: &SpatialVars) -> Result<Var> {
    let (_, frames) = tape.value(primary).dims2("assemble_features")?;
    for v in spatial.cos_ipd.iter().chain(&spatial.sin_ipd) {
        let (_, f) = tape.value(*v).dims2("assemble_features")?;
        if f != frames {
            return Err(Error::Alignment(format!(
                "spatial features have {f} frames, primary feature has {frames}"
            )));
        }
    }
    if spatial.cos_ipd.is_empty() {
        return Ok(primary);
    }
    let parts: Vec<Var> = std::iter::once(primary)
        .chain(spatial.cos_ipd.iter().copied())
        .chain(spatial.sin_ipd.iter().copied())
        .collect();
    tape.concat_rows(&parts)
}

/// Plain-tensor form of [`assemble_vars`]: `[(N·(1 + 2·pairs)) × F]`.
pub fn assemble_features(primary: &Tensor, spatial: &SpatialFeatures) -> Result<Tensor> {
    let (n, frames) = primary.dims2("assemble_features")?;
    let mut data = primary.data().to_vec();
    let mut rows = n;
    for t in spatial.cos_ipd.iter().chain(&spatial.sin_ipd) {
        let (r, f) = t.dims2("assemble_features")?;
        if f != frames {
            return Err(Error::Alignment(format!(
                "spatial features have {f} frames, primary feature has {frames}"
            )));
        }
        data.extend_from_slice(t.data());
        rows += r;
    }
    Tensor::new(&[rows, frames], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn noise(seed: u64, len: usize) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn phases_of(stft: &Stft, channels: &[Vec<f64>]) -> Vec<Tensor> {
        channels.iter().map(|c| stft.analyze(c).unwrap().phase()).collect()
    }

    #[test]
    fn recipe_pair_sets_give_expected_widths() {
        let primary = Tensor::zeros(&[257, 3]);
        for (pairs, width) in [(PairSet::wsj0(), 3341), (PairSet::librispeech(), 3855)] {
            let phases = vec![Tensor::zeros(&[257, 3]); 6];
            let feats = ipd(&phases, &pairs).unwrap();
            let out = assemble_features(&primary, &feats).unwrap();
            assert_eq!(out.shape(), &[width, 3]);
            assert_eq!(width, 257 * pairs.width_multiplier());
        }
        assert_eq!(PairSet::wsj0().width_multiplier(), 13);
        assert_eq!(PairSet::librispeech().width_multiplier(), 15);
    }

    #[test]
    fn no_pairs_is_passthrough() {
        let primary = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let feats = ipd(&[primary.clone()], &PairSet::empty()).unwrap();
        assert_eq!(assemble_features(&primary, &feats).unwrap(), primary);
    }

    #[test]
    fn invalid_pairs_are_config_errors() {
        assert!(matches!(PairSet::new(vec![(1, 1)]), Err(Error::Config(_))));
        assert!(matches!(PairSet::new(vec![(0, 2)]), Err(Error::Config(_))));
        let phases = vec![Tensor::zeros(&[3, 2]); 2];
        assert!(matches!(ipd(&phases, &PairSet::wsj0()), Err(Error::Config(_))));
        assert!(serde_json::from_str::<PairSet>("[[2,2]]").is_err());
        let back: PairSet = serde_json::from_str(&serde_json::to_string(&PairSet::wsj0()).unwrap()).unwrap();
        assert_eq!(back, PairSet::wsj0());
    }

    #[test]
    fn identical_channels_have_zero_ipd() {
        let stft = Stft::new(64, 16).unwrap();
        let x = noise(1, 400);
        let phases = phases_of(&stft, &[x.clone(), x]);
        let f = ipd(&phases, &PairSet::new(vec![(1, 2)]).unwrap()).unwrap();
        assert!(f.ipd[0].data().iter().all(|&v| v == 0.0));
        assert!(f.cos_ipd[0].data().iter().all(|&v| v == 1.0));
        assert!(f.sin_ipd[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_a_pair_negates_ipd_and_sine() {
        let stft = Stft::new(64, 16).unwrap();
        let phases = phases_of(&stft, &[noise(1, 300), noise(2, 300)]);
        let fwd = ipd(&phases, &PairSet::new(vec![(1, 2)]).unwrap()).unwrap();
        let rev = ipd(&phases, &PairSet::new(vec![(2, 1)]).unwrap()).unwrap();
        for i in 0..fwd.ipd[0].numel() {
            assert_eq!(fwd.ipd[0].data()[i], -rev.ipd[0].data()[i]);
            assert_eq!(fwd.cos_ipd[0].data()[i], rev.cos_ipd[0].data()[i]);
            assert_eq!(fwd.sin_ipd[0].data()[i], -rev.sin_ipd[0].data()[i]);
        }
    }

    /// With the correlation-form kernels the frames are the conjugate DFT, so
    /// a delay of `d` samples on the second channel shows up as `−2πkd/L`.
    #[test]
    fn integer_delay_gives_linear_phase() {
        let (l, d) = (64usize, 3usize);
        let stft = Stft::new(l, 16).unwrap();
        let burst = noise(9, 4000 + d);
        let ch1 = burst[d..].to_vec();
        let ch2 = burst[..4000].to_vec();
        let s1 = stft.analyze(&ch1).unwrap();
        let s2 = stft.analyze(&ch2).unwrap();
        let f = ipd(&[s1.phase(), s2.phase()], &PairSet::new(vec![(1, 2)]).unwrap()).unwrap();
        let frames = s1.frames();
        let (m1, m2) = (s1.magnitude(), s2.magnitude());
        for k in 1..l / 2 {
            // Energy-weighted circular mean over frames.
            let (mut c, mut s) = (0.0, 0.0);
            for t in 0..frames {
                let w = m1.data()[k * frames + t] * m2.data()[k * frames + t];
                c += w * f.cos_ipd[0].data()[k * frames + t];
                s += w * f.sin_ipd[0].data()[k * frames + t];
            }
            let norm = c.hypot(s);
            let want = -2.0 * PI * (k * d) as f64 / l as f64;
            assert!((c / norm - want.cos()).abs() < 0.05, "bin {k}: cos");
            assert!((s / norm - want.sin()).abs() < 0.05, "bin {k}: sin");
        }
    }

    #[test]
    fn kernel_route_matches_phase_route() {
        let stft = Stft::new(32, 8).unwrap();
        let chans = vec![noise(3, 500), noise(4, 500)];
        let pairs = PairSet::new(vec![(1, 2), (2, 1)]).unwrap();
        let via_phase = ipd(&phases_of(&stft, &chans), &pairs).unwrap();
        let via_kernels = ipd_from_waveform(&Tensor::from_rows(&chans).unwrap(), &stft, &pairs).unwrap();
        for (a, b) in via_phase.ipd.iter().zip(&via_kernels.ipd) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn silent_second_channel_passes_first_phase() {
        let stft = Stft::new(32, 8).unwrap();
        let x = noise(5, 200);
        let chans = Tensor::from_rows(&[x.clone(), vec![0.0; 200]]).unwrap();
        let f = ipd_from_waveform(&chans, &stft, &PairSet::new(vec![(1, 2)]).unwrap()).unwrap();
        assert_eq!(f.ipd[0], stft.analyze(&x).unwrap().phase());
    }

    #[test]
    fn frame_mismatch_is_alignment_error() {
        let primary = Tensor::zeros(&[4, 5]);
        let f = ipd(&vec![Tensor::zeros(&[4, 6]); 2], &PairSet::new(vec![(1, 2)]).unwrap()).unwrap();
        assert!(matches!(assemble_features(&primary, &f), Err(Error::Alignment(_))));
        let mut tape = Tape::new();
        let p = tape.constant(primary).unwrap();
        let ph: Vec<Var> = (0..2).map(|_| tape.constant(Tensor::zeros(&[4, 6])).unwrap()).collect();
        let sv = ipd_vars(&mut tape, &ph, &PairSet::new(vec![(1, 2)]).unwrap()).unwrap();
        assert!(matches!(assemble_vars(&mut tape, p, &sv), Err(Error::Alignment(_))));
    }

    #[test]
    fn tape_and_plain_assembly_agree() {
        let stft = Stft::new(32, 8).unwrap();
        let chans: Vec<Vec<f64>> = (0..3).map(|i| noise(10 + i, 160)).collect();
        let pairs = PairSet::new(vec![(1, 3), (2, 3)]).unwrap();
        let phases = phases_of(&stft, &chans);
        let mag = stft.analyze(&chans[0]).unwrap().magnitude();
        let plain = assemble_features(&mag, &ipd(&phases, &pairs).unwrap()).unwrap();
        let mut tape = Tape::new();
        let m = tape.constant(mag).unwrap();
        let ph: Vec<Var> = phases.iter().map(|p| tape.constant(p.clone()).unwrap()).collect();
        let sv = ipd_vars(&mut tape, &ph, &pairs).unwrap();
        let v = assemble_vars(&mut tape, m, &sv).unwrap();
        assert_eq!(tape.value(v), &plain);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn unit_circle_and_gain_invariance(seed in 0u64..1000, gain in 0.01f64..100.0) {
            let stft = Stft::new(32, 8).unwrap();
            let a = noise(seed, 256);
            let b = noise(seed + 1, 256);
            let pairs = PairSet::new(vec![(1, 2)]).unwrap();
            let base = ipd_from_waveform(&Tensor::from_rows(&[a.clone(), b.clone()]).unwrap(), &stft, &pairs).unwrap();
            for (c, s) in base.cos_ipd[0].data().iter().zip(base.sin_ipd[0].data()) {
                prop_assert!((c * c + s * s - 1.0).abs() < 1e-6);
            }
            let scaled: Vec<f64> = b.iter().map(|v| v * gain).collect();
            let other = ipd_from_waveform(&Tensor::from_rows(&[a, scaled]).unwrap(), &stft, &pairs).unwrap();
            for (x, y) in base.cos_ipd[0].data().iter().zip(other.cos_ipd[0].data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            for (x, y) in base.sin_ipd[0].data().iter().zip(other.sin_ipd[0].data()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
