//! Triplet hinge loss on squared distances and the two triplet samplers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{DatasetManifest, Domain, ImageRef};

pub const DEFAULT_MARGIN: f32 = 0.2;
pub const DIFFICULT_MARGIN: f32 = 0.5;
pub const DEFAULT_NEGATIVES_PER_PAIR: usize = 40;
pub const DEFAULT_PAIRS_PER_CLASS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletLossConfig {
    pub margin: f32,
}

impl Default for TripletLossConfig {
    fn default() -> Self {
        TripletLossConfig { margin: DEFAULT_MARGIN }
    }
}

impl TripletLossConfig {
    /// Enlarged margin for the reduced-training-set setting.
    pub fn difficult() -> Self {
        TripletLossConfig { margin: DIFFICULT_MARGIN }
    }

    pub fn validate(&self) -> Result<()> {
        check_margin(self.margin)
    }
}

fn check_margin(margin: f32) -> Result<()> {
    if margin > 0.0 && margin.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("margin must be positive, got {margin}")))
    }
}

fn check_lengths(a: &[f32], p: &[f32], n: &[f32]) -> Result<()> {
    for other in [p.len(), n.len()] {
        if other != a.len() {
            return Err(Error::LengthMismatch {
                left: a.len(),
                right: other,
            });
        }
    }
    Ok(())
}

fn sq_dist(x: &[f32], y: &[f32]) -> f64 {
    x.iter()
        .zip(y)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum()
}

/// `|a-p|^2 - |a-n|^2 + margin`; the loss is its positive part.
pub fn hinge_argument(a: &[f32], p: &[f32], n: &[f32], margin: f32) -> Result<f64> {
    check_lengths(a, p, n)?;
    check_margin(margin)?;
    Ok(sq_dist(a, p) - sq_dist(a, n) + f64::from(margin))
}

pub fn triplet_loss(a: &[f32], p: &[f32], n: &[f32], margin: f32) -> Result<f64> {
    Ok(hinge_argument(a, p, n, margin)?.max(0.0))
}

/// Gradients of [`triplet_loss`]. At the kink (argument exactly 0) the
/// inactive branch is taken.
pub fn triplet_loss_grad(a: &[f32], p: &[f32], n: &[f32], margin: f32) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let len = a.len();
    if hinge_argument(a, p, n, margin)? <= 0.0 {
        return Ok((vec![0.0; len], vec![0.0; len], vec![0.0; len]));
    }
    let mut da = Vec::with_capacity(len);
    let mut dp = Vec::with_capacity(len);
    let mut dn = Vec::with_capacity(len);
    for i in 0..len {
        let (ai, pi, ni) = (f64::from(a[i]), f64::from(p[i]), f64::from(n[i]));
        da.push((2.0 * (ni - pi)) as f32);
        dp.push((2.0 * (pi - ai)) as f32);
        dn.push((2.0 * (ai - ni)) as f32);
    }
    Ok((da, dp, dn))
}

/// For every (consumer anchor, shop positive) pair of each item, draw
/// `negatives_per_pair` shop negatives uniformly from the other items' shop
/// images. Output order follows the manifest.
pub fn sample_triplets_cross_domain<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    negatives_per_pair: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    if negatives_per_pair == 0 {
        return Err(Error::Config("negatives_per_pair must be at least 1".into()));
    }
    let shops: Vec<ImageRef> = manifest
        .items
        .iter()
        .flat_map(|it| manifest.images(it, Domain::Shop))
        .collect();
    let mut out = Vec::new();
    for item in &manifest.items {
        let pool: Vec<&ImageRef> = shops.iter().filter(|s| s.item != item.id).collect();
        if pool.is_empty() {
            return Err(Error::NoNegatives(format!(
                "item {} has no other item to draw negatives from",
                item.id
            )));
        }
        for anchor in manifest.images(item, Domain::Consumer) {
            for positive in manifest.images(item, Domain::Shop) {
                for _ in 0..negatives_per_pair {
                    let negative = pool[rng.random_range(0..pool.len())];
                    out.push(Triplet {
                        anchor: anchor.id.clone(),
                        positive: positive.id.clone(),
                        negative: negative.id.clone(),
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Within-domain sampling over shop images: each item is a class;
/// `pairs_per_class` (anchor, positive) pairs of distinct images are drawn
/// with replacement, each with one uniform negative from another class.
pub fn sample_triplets_inshop<R: Rng + ?Sized>(
    manifest: &DatasetManifest,
    pairs_per_class: usize,
    rng: &mut R,
) -> Result<Vec<Triplet>> {
    let classes: Vec<Vec<ImageRef>> = manifest
        .items
        .iter()
        .map(|it| manifest.images(it, Domain::Shop))
        .collect();
    if let Some((item, _)) = manifest.items.iter().zip(&classes).find(|(_, c)| c.len() < 2) {
        return Err(Error::Dataset(format!(
            "class {} has fewer than 2 images; in-shop pairs need at least 2",
            item.id
        )));
    }
    let mut out = Vec::with_capacity(classes.len() * pairs_per_class);
    for (ci, class) in classes.iter().enumerate() {
        let others: Vec<&ImageRef> = classes
            .iter()
            .enumerate()
            .filter(|(cj, _)| *cj != ci)
            .flat_map(|(_, c)| c.iter())
            .collect();
        if others.is_empty() {
            return Err(Error::NoNegatives(format!(
                "class {} is the only class",
                manifest.items[ci].id
            )));
        }
        for _ in 0..pairs_per_class {
            let a = rng.random_range(0..class.len());
            let mut p = rng.random_range(0..class.len() - 1);
            if p >= a {
                p += 1;
            }
            let negative = others[rng.random_range(0..others.len())];
            out.push(Triplet {
                anchor: class[a].id.clone(),
                positive: class[p].id.clone(),
                negative: negative.id.clone(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;
    use crate::synth::{ItemEntry, Split};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use std::collections::{BTreeMap, HashMap};

    fn manifest(shops: &[usize], consumers: &[usize]) -> DatasetManifest {
        let items = shops
            .iter()
            .zip(consumers)
            .enumerate()
            .map(|(i, (&s, &c))| {
                let id = format!("item{i:04}");
                ItemEntry {
                    shop: (0..s).map(|k| format!("images/{id}_shop_{k}.ppm")).collect(),
                    consumer: (0..c).map(|k| format!("images/{id}_consumer_{k}.ppm")).collect(),
                    id,
                    split: Split::Train,
                }
            })
            .collect();
        DatasetManifest {
            seed: 0,
            extents: [16, 16],
            items,
            hashes: BTreeMap::new(),
        }
    }

    fn labels(m: &DatasetManifest) -> HashMap<String, String> {
        m.all_images().into_iter().map(|r| (r.id, r.item)).collect()
    }

    #[test]
    fn loss_examples() {
        let a = [0.0, 0.0];
        assert_eq!(triplet_loss(&a, &a, &[1.0, 0.0], 0.2).unwrap(), 0.0);
        assert!((triplet_loss(&a, &a, &a, 0.2).unwrap() - 0.2).abs() < 1e-7);
        let p = [0.5f32.sqrt(), 0.0];
        let n = [0.0, 0.4f32.sqrt()];
        assert!((triplet_loss(&a, &p, &n, 0.2).unwrap() - 0.3).abs() < 1e-6);
    }

    #[test]
    fn loss_errors() {
        assert!(matches!(
            triplet_loss(&[0.0; 3], &[0.0; 2], &[0.0; 3], 0.2),
            Err(Error::LengthMismatch { .. })
        ));
        assert!(triplet_loss(&[0.0], &[0.0], &[0.0], 0.0).is_err());
        assert!(triplet_loss_grad(&[0.0], &[0.0], &[0.0; 2], 0.2).is_err());
        assert!(TripletLossConfig { margin: -1.0 }.validate().is_err());
        assert_eq!(TripletLossConfig::default().margin, 0.2);
        assert_eq!(TripletLossConfig::difficult().margin, 0.5);
    }

    #[test]
    fn grad_examples() {
        let (da, dp, dn) = triplet_loss_grad(&[0.0], &[0.0], &[5.0], 0.2).unwrap();
        assert_eq!((da, dp, dn), (vec![0.0], vec![0.0], vec![0.0]));
        let z = [0.0; 4];
        let (da, dp, dn) = triplet_loss_grad(&z, &z, &z, 0.2).unwrap();
        assert!(da.iter().chain(&dp).chain(&dn).all(|&v| v == 0.0));
        // 0.25 - 0.5625 + 0.3125 is exactly zero: the zero branch is chosen.
        assert_eq!(hinge_argument(&[0.0], &[0.5], &[0.75], 0.3125).unwrap(), 0.0);
        let (da, dp, dn) = triplet_loss_grad(&[0.0], &[0.5], &[0.75], 0.3125).unwrap();
        assert_eq!((da[0], dp[0], dn[0]), (0.0, 0.0, 0.0));
        let (da, dp, dn) = triplet_loss_grad(&[0.0], &[0.5], &[0.75], 0.5).unwrap();
        assert_eq!((da[0], dp[0], dn[0]), (0.5, 1.0, -1.5));
    }

    #[test]
    fn cross_domain_counts_and_errors() {
        let m = manifest(&[1, 1, 1], &[1, 1, 1]);
        let t = sample_triplets_cross_domain(&m, 2, &mut StreamKey::root(1).rng()).unwrap();
        assert_eq!(t.len(), 6);
        let one = manifest(&[1], &[1]);
        let err = sample_triplets_cross_domain(&one, 2, &mut StreamKey::root(1).rng()).unwrap_err();
        assert!(err.to_string().contains("no negatives available"), "{err}");
        let a = sample_triplets_cross_domain(&m, 40, &mut StreamKey::root(9).rng()).unwrap();
        let b = sample_triplets_cross_domain(&m, 40, &mut StreamKey::root(9).rng()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3 * 40);
    }

    #[test]
    fn cross_domain_covers_every_pair() {
        let m = manifest(&[2, 1, 3], &[2, 3, 1]);
        let t = sample_triplets_cross_domain(&m, 4, &mut StreamKey::root(2).rng()).unwrap();
        assert_eq!(t.len(), 4 * (2 * 2 + 1 * 3 + 3 * 1));
        let lab = labels(&m);
        for tr in &t {
            assert!(tr.anchor.contains("_consumer_"));
            assert!(tr.positive.contains("_shop_") && tr.negative.contains("_shop_"));
            assert_eq!(lab[&tr.anchor], lab[&tr.positive]);
            assert_ne!(lab[&tr.anchor], lab[&tr.negative]);
        }
    }

    #[test]
    fn inshop_counts_and_errors() {
        let m = manifest(&[2, 3], &[0, 0]);
        let t = sample_triplets_inshop(&m, 5, &mut StreamKey::root(1).rng()).unwrap();
        assert_eq!(t.len(), 10);
        let lab = labels(&m);
        for (i, tr) in t.iter().enumerate() {
            let class = if i < 5 { "item0000" } else { "item0001" };
            assert_eq!(lab[&tr.anchor], class);
            assert_eq!(lab[&tr.positive], class);
            assert_ne!(tr.anchor, tr.positive);
            assert_ne!(lab[&tr.negative], class);
        }
        assert!(sample_triplets_inshop(&manifest(&[2, 1], &[0, 0]), 5, &mut StreamKey::root(1).rng()).is_err());
        assert!(sample_triplets_inshop(&manifest(&[3], &[0]), 5, &mut StreamKey::root(1).rng()).is_err());
    }

    fn fd(f: impl Fn(&[f32]) -> f64, x: &[f32], i: usize) -> f64 {
        let h = 1e-3f32;
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        (f(&xp) - f(&xm)) / f64::from(xp[i] - xm[i])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn loss_is_nonnegative_with_exact_zero_condition(
            a in proptest::collection::vec(-1.0f32..1.0, 6),
            p in proptest::collection::vec(-1.0f32..1.0, 6),
            n in proptest::collection::vec(-1.0f32..1.0, 6),
            margin in 0.01f32..1.0,
        ) {
            let l = triplet_loss(&a, &p, &n, margin).unwrap();
            prop_assert!(l >= 0.0);
            let zero = sq_dist(&a, &p) + f64::from(margin) <= sq_dist(&a, &n);
            prop_assert_eq!(l == 0.0, zero);
        }

        #[test]
        fn grad_matches_finite_differences(
            a in proptest::collection::vec(-1.0f32..1.0, 5),
            p in proptest::collection::vec(-1.0f32..1.0, 5),
            n in proptest::collection::vec(-1.0f32..1.0, 5),
            margin in 0.05f32..1.0,
        ) {
            let arg = hinge_argument(&a, &p, &n, margin).unwrap();
            // Probes of size 1e-3 move the argument by at most ~1e-2 here.
            proptest::prop_assume!(arg.abs() > 2e-2);
            let (da, dp, dn) = triplet_loss_grad(&a, &p, &n, margin).unwrap();
            for i in 0..5 {
                let checks = [
                    (f64::from(da[i]), fd(|v| triplet_loss(v, &p, &n, margin).unwrap(), &a, i)),
                    (f64::from(dp[i]), fd(|v| triplet_loss(&a, v, &n, margin).unwrap(), &p, i)),
                    (f64::from(dn[i]), fd(|v| triplet_loss(&a, &p, v, margin).unwrap(), &n, i)),
                ];
                for (an, nu) in checks {
                    let err = (an - nu).abs();
                    prop_assert!(err <= 1e-3 * an.abs().max(nu.abs()) || err <= 1e-5, "{} vs {}", an, nu);
                }
            }
        }

        #[test]
        fn samplers_respect_labels(shops in proptest::collection::vec(2usize..4, 2..5), seed in 0u64..1000) {
            let consumers: Vec<usize> = shops.iter().map(|s| s % 3 + 1).collect();
            let m = manifest(&shops, &consumers);
            let lab = labels(&m);
            let mut rng = StreamKey::root(seed).rng();
            let cross = sample_triplets_cross_domain(&m, 3, &mut rng).unwrap();
            let inshop = sample_triplets_inshop(&m, 7, &mut rng).unwrap();
            for t in cross.iter().chain(&inshop) {
                prop_assert_eq!(&lab[&t.anchor], &lab[&t.positive]);
                prop_assert!(lab[&t.anchor] != lab[&t.negative]);
                prop_assert!(t.anchor != t.positive && t.anchor != t.negative && t.positive != t.negative);
            }
        }
    }
}
