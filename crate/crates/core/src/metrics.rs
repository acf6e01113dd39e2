//! Masked image-quality measures.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::warp::{Mask, Plane};

fn check_shapes(sr: &Plane, hr: &Plane, m: &Mask) -> Result<()> {
    if sr.dims() != hr.dims() || sr.channels() != hr.channels() || m.dims() != sr.dims() {
        return Err(Error::ShapeMismatch(format!(
            "sr {}x{}x{}, hr {}x{}x{}, mask {}x{}",
            sr.width(),
            sr.height(),
            sr.channels(),
            hr.width(),
            hr.height(),
            hr.channels(),
            m.width(),
            m.height()
        )));
    }
    if m.count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

/// Sum over valid pixels and all channels of `f(sr − hr)`.
fn masked_sum(sr: &Plane, hr: &Plane, m: &Mask, f: impl Fn(f64) -> f64) -> f64 {
    let n = m.data().len();
    let mut acc = 0.0;
    for c in 0..sr.channels() {
        let (a, b) = (sr.channel(c), hr.channel(c));
        for p in 0..n {
            if m.data()[p] != 0 {
                acc += f(a[p] - b[p]);
            }
        }
    }
    acc
}

/// Masked PSNR in dB for images in `[0, 1]`.
///
/// The squared error of valid pixels is summed over channels and
/// normalized by `valid_pixels × channels`, so a full mask gives the usual
/// PSNR. Returns `+∞` when the masked error vanishes.
pub fn mpsnr(sr: &Plane, hr: &Plane, m: &Mask) -> Result<f64> {
    check_shapes(sr, hr, m)?;
    let sse = masked_sum(sr, hr, m, |d| d * d);
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let n = (m.count() * sr.channels()) as f64;
    Ok(10.0 * (n / sse).log10())
}

/// Mean absolute error over valid pixels and all channels.
pub fn masked_l1(sr: &Plane, hr: &Plane, m: &Mask) -> Result<f64> {
    check_shapes(sr, hr, m)?;
    let n = (m.count() * sr.channels()) as f64;
    Ok(masked_sum(sr, hr, m, f64::abs) / n)
}

pub(crate) fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value `{t}`"))),
    }
}

/// Evaluation summary for one image pair. `+∞` dB serializes as `"inf"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub mpsnr_db: f64,
    pub valid_count: usize,
    pub l1: f64,
}

impl EvalReport {
    pub fn compute(sr: &Plane, hr: &Plane, m: &Mask) -> Result<Self> {
        Ok(Self {
            mpsnr_db: mpsnr(sr, hr, m)?,
            valid_count: m.count(),
            l1: masked_l1(sr, hr, m)?,
        })
    }
}
