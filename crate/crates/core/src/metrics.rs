//! Critical success index and the meteorological conversions used to place
//! evaluation thresholds.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;

/// Max-pooling windows reported by default.
pub const POOLINGS: [usize; 3] = [1, 4, 16];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsiScore {
    pub pool: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub csi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiReport {
    pub threshold: f64,
    pub scores: Vec<CsiScore>,
}

impl CsiReport {
    pub fn at(&self, pool: usize) -> Option<&CsiScore> {
        self.scores.iter().find(|s| s.pool == pool)
    }
}

/// Binary mask of `field >= tau`, max-pooled with window = stride = `pool`.
/// Ragged edges are padded by replicating the last row and column.
fn pooled_mask(field: &Field, tau: f64, pool: usize) -> Vec<bool> {
    let (h, w) = field.shape();
    let ph = h.div_ceil(pool);
    let pw = w.div_ceil(pool);
    let mut out = vec![false; ph * pw];
    for r in 0..ph * pool {
        let sr = r.min(h - 1);
        for c in 0..pw * pool {
            let sc = c.min(w - 1);
            if field.get(sr, sc) >= tau {
                out[(r / pool) * pw + c / pool] = true;
            }
        }
    }
    out
}

/// CSI = TP / (TP + FN + FP) after thresholding at `tau` and max pooling.
/// Defined as 1 when there are no events in either field.
pub fn csi(pred: &Field, obs: &Field, tau: f64, pool: usize) -> Result<CsiScore> {
    pred.check_same_shape(obs)?;
    if pool == 0 {
        return Err(Error::param("pool", "window must be >= 1"));
    }
    let p = pooled_mask(pred, tau, pool);
    let o = pooled_mask(obs, tau, pool);
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (a, b) in p.iter().zip(&o) {
        match (a, b) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = tp + fp + fn_;
    let csi = if denom == 0 { 1.0 } else { tp as f64 / denom as f64 };
    Ok(CsiScore { pool, tp, fp, fn_, csi })
}

pub fn csi_report(pred: &Field, obs: &Field, tau: f64, pools: &[usize]) -> Result<CsiReport> {
    Ok(CsiReport {
        threshold: tau,
        scores: pools.iter().map(|&p| csi(pred, obs, tau, p)).collect::<Result<_>>()?,
    })
}

/// CSI from counts pooled over many field pairs.
pub fn aggregate(scores: &[CsiScore]) -> Option<CsiScore> {
    let first = scores.first()?;
    let (tp, fp, fn_) = scores
        .iter()
        .fold((0, 0, 0), |(a, b, c), s| (a + s.tp, b + s.fp, c + s.fn_));
    let denom = tp + fp + fn_;
    Some(CsiScore {
        pool: first.pool,
        tp,
        fp,
        fn_,
        csi: if denom == 0 { 1.0 } else { tp as f64 / denom as f64 },
    })
}

pub const ZR_A: f64 = 58.53;
pub const ZR_B: f64 = 1.56;

/// Rain rate (mm/h) to reflectivity (dBZ): `10 log10(a) + 10 b log10(R)`.
pub fn zr_rain_to_dbz(rain: f64) -> Result<f64> {
    if !(rain > 0.0) || !rain.is_finite() {
        return Err(Error::Domain(format!("rain rate must be > 0, got {rain}")));
    }
    Ok(10.0 * ZR_A.log10() + 10.0 * ZR_B * rain.log10())
}

pub fn dbz_to_rain(dbz: f64) -> Result<f64> {
    if !dbz.is_finite() {
        return Err(Error::Domain(format!("reflectivity must be finite, got {dbz}")));
    }
    Ok(10f64.powf((dbz - 10.0 * ZR_A.log10()) / (10.0 * ZR_B)))
}

/// SEVIR VIL pixel (0..=254) to kg/m^2.
pub fn vil_pixel_to_kgm2(x: f64) -> Result<f64> {
    if !(0.0..=254.0).contains(&x) {
        return Err(Error::Domain(format!("VIL pixel must lie in [0, 254], got {x}")));
    }
    Ok(if x <= 5.0 {
        0.0
    } else if x <= 18.0 {
        (x - 2.0) / 90.66
    } else {
        ((x - 83.9) / 38.9).exp()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetTag {
    Sevir,
    Hko7,
    Taasrad19,
    Srad2018,
    ScwdsCap30,
    ScwdsCr,
    MeteoNet,
    Synthetic,
}

impl FromStr for DatasetTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "sevir" => Self::Sevir,
            "hko7" => Self::Hko7,
            "taasrad19" => Self::Taasrad19,
            "srad2018" => Self::Srad2018,
            "scwds_cap30" => Self::ScwdsCap30,
            "scwds_cr" => Self::ScwdsCr,
            "meteonet" => Self::MeteoNet,
            "synthetic" => Self::Synthetic,
            other => return Err(Error::Domain(format!("unknown dataset tag `{other}`"))),
        })
    }
}

impl fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sevir => "SEVIR",
            Self::Hko7 => "HKO7",
            Self::Taasrad19 => "TAASRAD19",
            Self::Srad2018 => "SRAD2018",
            Self::ScwdsCap30 => "SCWDS_CAP30",
            Self::ScwdsCr => "SCWDS_CR",
            Self::MeteoNet => "MeteoNet",
            Self::Synthetic => "synthetic",
        })
    }
}

/// Extreme-event threshold in the dataset's native unit (kg/m^2, mm/h or dBZ).
/// The synthetic tag needs reference fields and a quantile.
pub fn threshold_table(tag: DatasetTag, synthetic: Option<(&[Field], f64)>) -> Result<f64> {
    Ok(match tag {
        DatasetTag::Sevir => 32.24,
        DatasetTag::Hko7 | DatasetTag::Taasrad19 | DatasetTag::Srad2018 => 30.0,
        DatasetTag::ScwdsCap30 | DatasetTag::ScwdsCr => 40.0,
        DatasetTag::MeteoNet => 47.0,
        DatasetTag::Synthetic => {
            let (fields, q) = synthetic
                .ok_or_else(|| Error::Domain("synthetic threshold needs reference fields".into()))?;
            quantile_threshold(fields, q)?
        }
    })
}

/// Nearest-rank quantile over all pixels of `fields`.
pub fn quantile_threshold(fields: &[Field], q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) || q == 0.0 {
        return Err(Error::Domain(format!("quantile must lie in (0, 1], got {q}")));
    }
    let mut all: Vec<f64> = fields.iter().flat_map(|f| f.values().iter().copied()).collect();
    if all.is_empty() {
        return Err(Error::Data("no pixels to take a quantile of".into()));
    }
    all.sort_by(f64::total_cmp);
    let rank = (q * all.len() as f64).ceil() as usize;
    Ok(all[rank.clamp(1, all.len()) - 1])
}

/// One row of the report CSV.
pub fn report_rows(label: &str, report: &CsiReport) -> Vec<String> {
    report
        .scores
        .iter()
        .map(|s| format!("{label},{},{},{},{},{},{}", report.threshold, s.pool, s.tp, s.fp, s.fn_, s.csi))
        .collect()
}

pub const REPORT_HEADER: &str = "dataset,threshold,pool,tp,fp,fn,csi";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Units;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Field {
        let mut f = Field::zeros(h, w, Units::Data);
        for &(r, c) in on {
            f.set(r, c, 1.0);
        }
        f
    }

    #[test]
    fn identical_fields_score_one() {
        let f = mask(8, 8, &[(1, 1), (5, 6)]);
        for p in POOLINGS {
            assert_eq!(csi(&f, &f, 0.5, p).unwrap().csi, 1.0);
        }
    }

    #[test]
    fn missing_prediction_scores_zero() {
        let obs = mask(8, 8, &[(3, 3)]);
        let pred = Field::zeros(8, 8, Units::Data);
        for p in POOLINGS {
            assert_eq!(csi(&pred, &obs, 0.5, p).unwrap().csi, 0.0);
        }
    }

    #[test]
    fn hand_counted_fixture() {
        let pred = mask(4, 4, &[(0, 0)]);
        let obs = mask(4, 4, &[(0, 1)]);
        let p1 = csi(&pred, &obs, 0.5, 1).unwrap();
        assert_eq!((p1.tp, p1.fp, p1.fn_, p1.csi), (0, 1, 1, 0.0));
        let p4 = csi(&pred, &obs, 0.5, 4).unwrap();
        assert_eq!((p4.tp, p4.fp, p4.fn_, p4.csi), (1, 0, 0, 1.0));
        // 2x2 windows: (0,0) and (0,1) share the top-left cell.
        let p2 = csi(&pred, &obs, 0.5, 2).unwrap();
        assert_eq!((p2.tp, p2.fp, p2.fn_), (1, 0, 0));
    }

    #[test]
    fn vacuous_agreement_is_perfect() {
        let z = Field::zeros(4, 4, Units::Data);
        let s = csi(&z, &z, 0.5, 1).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_, s.csi), (0, 0, 0, 1.0));
    }

    #[test]
    fn ragged_grids_are_replicate_padded() {
        // 5x5 with pool 4: the padded cell (1,1) replicates pixel (4,4).
        let pred = mask(5, 5, &[(4, 4)]);
        let s = csi(&pred, &pred, 0.5, 4).unwrap();
        assert_eq!(s.tp, 1);
        let obs = mask(5, 5, &[(0, 4)]);
        let s = csi(&pred, &obs, 0.5, 4).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (0, 1, 1));
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            csi(&mask(4, 4, &[]), &mask(4, 5, &[]), 0.5, 1),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zr_values() {
        let r1 = zr_rain_to_dbz(1.0).unwrap();
        assert!((r1 - 10.0 * 58.53f64.log10()).abs() < 1e-12);
        assert!((r1 - 17.674).abs() < 1e-3);
        assert!((zr_rain_to_dbz(30.0).unwrap() - 40.72).abs() < 5e-3);
        for r in [0.1, 1.0, 30.0] {
            let back = dbz_to_rain(zr_rain_to_dbz(r).unwrap()).unwrap();
            assert!((back - r).abs() / r <= 1e-10);
        }
        assert!(zr_rain_to_dbz(0.0).is_err());
        assert!(zr_rain_to_dbz(-1.0).is_err());
    }

    #[test]
    fn vil_boundaries() {
        assert_eq!(vil_pixel_to_kgm2(0.0).unwrap(), 0.0);
        assert_eq!(vil_pixel_to_kgm2(5.0).unwrap(), 0.0);
        assert!((vil_pixel_to_kgm2(18.0).unwrap() - 16.0 / 90.66).abs() < 1e-12);
        assert!((vil_pixel_to_kgm2(18.0).unwrap() - 0.17648).abs() < 1e-5);
        assert!((vil_pixel_to_kgm2(254.0).unwrap() - (170.1f64 / 38.9).exp()).abs() < 1e-12);
        assert!((vil_pixel_to_kgm2(254.0).unwrap() - 79.2).abs() < 0.1);
        assert!(vil_pixel_to_kgm2(255.0).is_err());
        assert!(vil_pixel_to_kgm2(-0.5).is_err());
    }

    #[test]
    fn thresholds() {
        assert_eq!(threshold_table(DatasetTag::Sevir, None).unwrap(), 32.24);
        assert_eq!(threshold_table(DatasetTag::Hko7, None).unwrap(), 30.0);
        assert_eq!(threshold_table(DatasetTag::MeteoNet, None).unwrap(), 47.0);
        assert!(threshold_table(DatasetTag::Synthetic, None).is_err());
        assert!("nope".parse::<DatasetTag>().is_err());
        assert_eq!("scwds_cr".parse::<DatasetTag>().unwrap(), DatasetTag::ScwdsCr);
    }

    #[test]
    fn synthetic_quantile_matches_sort() {
        let mut rng = seeded(3);
        let fields: Vec<Field> = (0..3)
            .map(|_| Field::from_fn(10, 10, Units::Data, |_, _| rng.random::<f64>()))
            .collect();
        let mut all: Vec<f64> = fields.iter().flat_map(|f| f.values().to_vec()).collect();
        all.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // 300 pixels: the 99th percentile by nearest rank is the 297th smallest.
        assert_eq!(threshold_table(DatasetTag::Synthetic, Some((&fields, 0.99))).unwrap(), all[296]);
    }

    #[test]
    fn pooling_can_lower_csi_when_hits_cluster() {
        // Sixteen hits collapse into one pooled hit while the lone false alarm survives.
        let mut on: Vec<(usize, usize)> = (0..4).flat_map(|r| (0..4).map(move |c| (r, c))).collect();
        let obs = mask(8, 8, &on);
        on.push((6, 6));
        let pred = mask(8, 8, &on);
        assert_eq!(csi(&pred, &obs, 0.5, 1).unwrap().csi, 16.0 / 17.0);
        assert_eq!(csi(&pred, &obs, 0.5, 4).unwrap().csi, 0.5);
    }

    fn random_pair(seed: u64, h: usize, w: usize) -> (Field, Field) {
        let mut rng = seeded(seed);
        let mut f = || Field::from_fn(h, w, Units::Data, |_, _| rng.random::<f64>());
        (f(), f())
    }

    proptest! {
        #[test]
        fn pooling_never_lowers_csi(seed in 0u64..500, tau in 0.5f64..0.99) {
            let (a, b) = random_pair(seed, 32, 32);
            let c1 = csi(&a, &b, tau, 1).unwrap().csi;
            let c4 = csi(&a, &b, tau, 4).unwrap().csi;
            let c16 = csi(&a, &b, tau, 16).unwrap().csi;
            prop_assert!((0.0..=1.0).contains(&c1));
            prop_assert!(c4 >= c1 && c16 >= c4, "{c1} {c4} {c16}");
        }

        #[test]
        fn threshold_commutes_with_max_pool(seed in 0u64..500, tau in 0.0f64..1.0, pool in 1usize..6) {
            let (a, _) = random_pair(seed, 12, 12);
            let pooled = pooled_mask(&a, tau, pool);
            // Pool first, then binarize.
            let ph = 12usize.div_ceil(pool);
            for pr in 0..ph {
                for pc in 0..ph {
                    let mut m = f64::NEG_INFINITY;
                    for r in pr * pool..(pr + 1) * pool {
                        for c in pc * pool..(pc + 1) * pool {
                            m = m.max(a.get(r.min(11), c.min(11)));
                        }
                    }
                    prop_assert_eq!(m >= tau, pooled[pr * ph + pc]);
                }
            }
        }
    }
}
