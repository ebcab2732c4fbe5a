//! Constant-size mixing of real and synthetic training sets.
//!
//! A hybrid set at ratio `a:b` keeps the total image count and the class
//! balance of a pure set while swapping a fraction of each class for
//! synthetic images. Counts come from integer apportionment, never float
//! accumulation, so every run of the same spec lands on identical counts:
//!
//! 1. The global real count is `round_half_up(total * a / (a + b))`.
//! 2. Class totals spread `total` uniformly over classes by largest
//!    remainder, extra units to the lowest class indices.
//! 3. The real count is apportioned over classes the same way; synthetic
//!    per-class counts are the difference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{select_ranks, LabeledImageSet, Provenance};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Mixing ratio `original : synthetic`, e.g. `5:1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub original: u32,
    pub synthetic: u32,
}

impl Ratio {
    pub fn new(original: u32, synthetic: u32) -> Result<Self> {
        if original == 0 && synthetic == 0 {
            return Err(Error::Validation("ratio 0:0 is meaningless".into()));
        }
        Ok(Ratio { original, synthetic })
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.original, self.synthetic)
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("bad ratio {s:?}, expected \"a:b\""));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let original = a.trim().parse::<u32>().map_err(|_| bad())?;
        let synthetic = b.trim().parse::<u32>().map_err(|_| bad())?;
        Ratio::new(original, synthetic)
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

/// A training-set composition: all real, all synthetic, or a mix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Composition {
    Original,
    Synthetic,
    Mixed(Ratio),
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Composition::Original => f.write_str("original"),
            Composition::Synthetic => f.write_str("synthetic"),
            Composition::Mixed(r) => write!(f, "{r}"),
        }
    }
}

impl FromStr for Composition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "original" => Ok(Composition::Original),
            "synthetic" => Ok(Composition::Synthetic),
            other => Ok(Composition::Mixed(other.parse()?)),
        }
    }
}

impl TryFrom<String> for Composition {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Composition> for String {
    fn from(c: Composition) -> String {
        c.to_string()
    }
}

/// Full mixing instruction: ratio, output size, selection seed.
///
/// With `class_balanced` (the default) per-class totals are held even and
/// the ratio is enforced within every class. Without it, sampling is
/// stratified only by provenance: the global ratio still holds exactly,
/// but classes contribute in proportion to whatever the seeded draw picks.
/// The unbalanced mode matters for skewed sources, where high ratios can
/// demand more per-class originals than exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub ratio: Ratio,
    pub total: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub class_balanced: bool,
}

fn default_true() -> bool {
    true
}

impl MixtureSpec {
    pub fn balanced(ratio: Ratio, total: usize, seed: u64) -> Self {
        MixtureSpec { ratio, total, seed, class_balanced: true }
    }
}

impl Composition {
    /// The equivalent `original:synthetic` ratio.
    pub fn as_ratio(&self) -> Ratio {
        match self {
            Composition::Original => Ratio { original: 1, synthetic: 0 },
            Composition::Synthetic => Ratio { original: 0, synthetic: 1 },
            Composition::Mixed(r) => *r,
        }
    }
}

/// Per-class and global provenance counts of a composed set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixAudit {
    pub n_original: usize,
    pub n_synthetic: usize,
    /// Per class: `(original, synthetic)` counts, indexed by class.
    pub per_class: Vec<(usize, usize)>,
}

/// `round_half_up(total * num / den)` in exact integer arithmetic.
fn round_half_up_share(total: usize, num: u64, den: u64) -> usize {
    debug_assert!(den > 0);
    let p = total as u128 * num as u128;
    let q = den as u128;
    ((2 * p + q) / (2 * q)) as usize
}

/// Spread `count` units over `classes` bins as evenly as possible, extra
/// units to the lowest indices (the largest-remainder rule with uniform
/// quotas: every remainder ties, and ties break by ascending class).
fn apportion_uniform(count: usize, classes: usize) -> Vec<usize> {
    let base = count / classes;
    let extra = count % classes;
    (0..classes).map(|c| base + usize::from(c < extra)).collect()
}

/// Planned per-class counts for a class-balanced mixture, before touching
/// any images. Unbalanced mixtures have no a-priori per-class plan; their
/// composition is read off the output with [`audit`].
pub fn plan(spec: &MixtureSpec, num_classes: usize) -> Result<MixAudit> {
    if spec.total == 0 {
        return Err(Error::Validation("mixture total must be positive".into()));
    }
    if num_classes == 0 {
        return Err(Error::Validation("need at least one class".into()));
    }
    if !spec.class_balanced {
        return Err(Error::Validation(
            "per-class plans exist only for class-balanced mixtures".into(),
        ));
    }
    if spec.total < num_classes {
        return Err(Error::Validation(format!(
            "class-balanced total {} is below the class count {num_classes}",
            spec.total
        )));
    }
    let (a, b) = (spec.ratio.original, spec.ratio.synthetic);
    if a == 0 && b == 0 {
        return Err(Error::Validation("ratio 0:0 is meaningless".into()));
    }
    let n_original = round_half_up_share(spec.total, a as u64, (a + b) as u64);
    let class_totals = apportion_uniform(spec.total, num_classes);
    let class_original = apportion_uniform(n_original, num_classes);
    let per_class: Vec<(usize, usize)> = class_totals
        .iter()
        .zip(&class_original)
        .map(|(&t, &o)| (o, t - o))
        .collect();
    Ok(MixAudit {
        n_original,
        n_synthetic: spec.total - n_original,
        per_class,
    })
}

/// Build the hybrid set.
///
/// Class-balanced: images are selected per class with seeded sampling,
/// then laid out class-major, real images before synthetic ones, source
/// order preserved within each block. Unbalanced: the global quota is
/// drawn from each source as a whole, laid out as one real block followed
/// by one synthetic block, source order preserved.
pub fn compose(
    original: &LabeledImageSet,
    synthetic: &LabeledImageSet,
    spec: &MixtureSpec,
) -> Result<LabeledImageSet> {
    if original.num_classes() != synthetic.num_classes() {
        return Err(Error::Consistency(format!(
            "class count mismatch: {} vs {}",
            original.num_classes(),
            synthetic.num_classes()
        )));
    }
    if original.image_shape() != synthetic.image_shape() {
        return Err(Error::Consistency(format!(
            "image shape mismatch: {:?} vs {:?}",
            original.image_shape(),
            synthetic.image_shape()
        )));
    }
    if !spec.class_balanced {
        return compose_unbalanced(original, synthetic, spec);
    }
    let classes = original.num_classes();
    let audit = plan(spec, classes)?;

    let seed_o = derive_seed(spec.seed, "mix-original", 0);
    let seed_s = derive_seed(spec.seed, "mix-synthetic", 0);
    let mut orig_rows = Vec::with_capacity(audit.n_original);
    let mut syn_rows = Vec::with_capacity(audit.n_synthetic);
    // Classes assemble in ascending order, so per-class picks concatenate
    // into the final class-major layout directly.
    let mut layout = Vec::with_capacity(spec.total);
    for class in 0..classes {
        let (want_o, want_s) = audit.per_class[class];
        let have_o = original.class_indices(class);
        let have_s = synthetic.class_indices(class);
        if have_o.len() < want_o {
            return Err(Error::Capacity(format!(
                "class {class}: need {want_o} original images, have {} (short {})",
                have_o.len(),
                want_o - have_o.len()
            )));
        }
        if have_s.len() < want_s {
            return Err(Error::Capacity(format!(
                "class {class}: need {want_s} synthetic images, have {} (short {})",
                have_s.len(),
                want_s - have_s.len()
            )));
        }
        for r in select_ranks(have_o.len(), want_o, seed_o, class) {
            layout.push((Provenance::Real, orig_rows.len()));
            orig_rows.push(have_o[r]);
        }
        for r in select_ranks(have_s.len(), want_s, seed_s, class) {
            layout.push((Provenance::Synthetic, syn_rows.len()));
            syn_rows.push(have_s[r]);
        }
    }

    let name = format!("mix_{}to{}", spec.ratio.original, spec.ratio.synthetic);
    let picked_o = original.select(&orig_rows, "mix_real_part")?;
    let picked_s = synthetic.select(&syn_rows, "mix_synthetic_part")?;
    let stacked = picked_o.concat(&picked_s, &name)?;
    // `layout` records where each stacked row belongs in class-major order.
    let perm: Vec<usize> = layout
        .into_iter()
        .map(|(prov, row)| match prov {
            Provenance::Real => row,
            Provenance::Synthetic => orig_rows.len() + row,
        })
        .collect();
    stacked.select(&perm, name)
}

/// The provenance-stratified path: global quotas only.
fn compose_unbalanced(
    original: &LabeledImageSet,
    synthetic: &LabeledImageSet,
    spec: &MixtureSpec,
) -> Result<LabeledImageSet> {
    if spec.total == 0 {
        return Err(Error::Validation("mixture total must be positive".into()));
    }
    let (a, b) = (spec.ratio.original, spec.ratio.synthetic);
    let n_original = round_half_up_share(spec.total, a as u64, (a + b) as u64);
    let n_synthetic = spec.total - n_original;
    if original.len() < n_original {
        return Err(Error::Capacity(format!(
            "need {n_original} original images, have {} (short {})",
            original.len(),
            n_original - original.len()
        )));
    }
    if synthetic.len() < n_synthetic {
        return Err(Error::Capacity(format!(
            "need {n_synthetic} synthetic images, have {} (short {})",
            synthetic.len(),
            n_synthetic - synthetic.len()
        )));
    }
    let seed_o = derive_seed(spec.seed, "mix-original", 0);
    let seed_s = derive_seed(spec.seed, "mix-synthetic", 0);
    let orig_rows: Vec<usize> = select_ranks(original.len(), n_original, seed_o, 0).collect();
    let syn_rows: Vec<usize> = select_ranks(synthetic.len(), n_synthetic, seed_s, 0).collect();
    let name = format!("mix_{a}to{b}");
    let picked_o = original.select(&orig_rows, "mix_real_part")?;
    let picked_s = synthetic.select(&syn_rows, "mix_synthetic_part")?;
    picked_o.concat(&picked_s, name)
}

/// Count provenance per class in an existing set.
pub fn audit(set: &LabeledImageSet) -> MixAudit {
    let mut per_class = vec![(0usize, 0usize); set.num_classes()];
    let mut n_original = 0;
    let mut n_synthetic = 0;
    for (i, &prov) in set.provenance().iter().enumerate() {
        let slot = &mut per_class[set.label(i)];
        match prov {
            Provenance::Real => {
                slot.0 += 1;
                n_original += 1;
            }
            Provenance::Synthetic => {
                slot.1 += 1;
                n_synthetic += 1;
            }
        }
    }
    MixAudit { n_original, n_synthetic, per_class }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::testutil::tiny_set;

    fn spec(a: u32, b: u32, total: usize, seed: u64) -> MixtureSpec {
        MixtureSpec::balanced(Ratio::new(a, b).unwrap(), total, seed)
    }

    fn unbalanced(a: u32, b: u32, total: usize, seed: u64) -> MixtureSpec {
        MixtureSpec { class_balanced: false, ..spec(a, b, total, seed) }
    }

    #[test]
    fn ratio_parsing_round_trips_and_rejects_junk() {
        let r: Ratio = "5:1".parse().unwrap();
        assert_eq!(r, Ratio { original: 5, synthetic: 1 });
        assert_eq!(r.to_string(), "5:1");
        assert_eq!(" 7 : 1 ".parse::<Ratio>().unwrap().to_string(), "7:1");
        for bad in ["", "5", "5:", ":1", "a:b", "5:-1", "0:0", "1:1:1"] {
            assert!(bad.parse::<Ratio>().is_err(), "{bad:?} should fail");
        }
        assert_eq!("original".parse::<Composition>().unwrap(), Composition::Original);
        assert_eq!(
            "10:1".parse::<Composition>().unwrap(),
            Composition::Mixed(Ratio { original: 10, synthetic: 1 })
        );
    }

    #[test]
    fn plan_matches_hand_checked_grids() {
        // 5:1 over 60000 in 10 classes: 50000 real, 5000 + 1000 per class.
        let p = plan(&spec(5, 1, 60_000, 0), 10).unwrap();
        assert_eq!(p.n_original, 50_000);
        assert_eq!(p.n_synthetic, 10_000);
        assert!(p.per_class.iter().all(|&c| c == (5_000, 1_000)));

        // 7:1 over 10000: 8750 real, 875 + 125 per class.
        let p = plan(&spec(7, 1, 10_000, 0), 10).unwrap();
        assert_eq!(p.n_original, 8_750);
        assert!(p.per_class.iter().all(|&c| c == (875, 125)));

        // 1:1 over 20: one of each per class.
        let p = plan(&spec(1, 1, 20, 0), 10).unwrap();
        assert!(p.per_class.iter().all(|&c| c == (1, 1)));

        // 2:1 over 10000: global 6667 after round-half-up of 6666.67;
        // the 7 leftover units go to classes 0-6.
        let p = plan(&spec(2, 1, 10_000, 0), 10).unwrap();
        assert_eq!(p.n_original, 6_667);
        for (c, &(o, s)) in p.per_class.iter().enumerate() {
            let want_o = if c < 7 { 667 } else { 666 };
            assert_eq!(o, want_o, "class {c}");
            assert_eq!(o + s, 1_000);
        }

        // Exact half rounds up: 1:1 over 15 gives 8 real.
        let p = plan(&spec(1, 1, 15, 0), 10).unwrap();
        assert_eq!(p.n_original, 8);
        assert_eq!(p.n_synthetic, 7);
    }

    #[test]
    fn pure_ratios_degenerate_cleanly() {
        let p = plan(&spec(1, 0, 1000, 0), 10).unwrap();
        assert_eq!(p.n_original, 1000);
        assert_eq!(p.n_synthetic, 0);
        let p = plan(&spec(0, 1, 1000, 0), 10).unwrap();
        assert_eq!(p.n_original, 0);
    }

    fn synthetic_twin(count: usize, classes: usize) -> LabeledImageSet {
        let base = tiny_set(count, classes, 4, 4, 1);
        LabeledImageSet::new(
            "twin_synthetic",
            base.images().clone(),
            base.labels().to_vec(),
            base.num_classes(),
            vec![Provenance::Synthetic; count],
        )
        .unwrap()
    }

    #[test]
    fn compose_meets_plan_and_is_deterministic() {
        let original = tiny_set(100, 5, 4, 4, 1);
        let synthetic = synthetic_twin(100, 5);
        let s = spec(3, 1, 60, 77);
        let mixed = compose(&original, &synthetic, &s).unwrap();
        assert_eq!(mixed.len(), 60);
        let a = audit(&mixed);
        assert_eq!(a, plan(&s, 5).unwrap());
        let again = compose(&original, &synthetic, &s).unwrap();
        assert_eq!(mixed.images(), again.images());
        assert_eq!(mixed.labels(), again.labels());
        let other_seed = compose(&original, &synthetic, &spec(3, 1, 60, 78)).unwrap();
        assert_ne!(mixed.images(), other_seed.images());
    }

    #[test]
    fn compose_layout_is_class_major_real_first() {
        let original = tiny_set(40, 4, 4, 4, 1);
        let synthetic = synthetic_twin(40, 4);
        let mixed = compose(&original, &synthetic, &spec(1, 1, 24, 3)).unwrap();
        let labels = mixed.labels();
        let provs = mixed.provenance();
        // 6 per class: 3 real then 3 synthetic, classes ascending.
        for class in 0..4 {
            for slot in 0..6 {
                let i = class * 6 + slot;
                assert_eq!(labels[i] as usize, class);
                let want = if slot < 3 { Provenance::Real } else { Provenance::Synthetic };
                assert_eq!(provs[i], want, "index {i}");
            }
        }
    }

    #[test]
    fn compose_never_reuses_a_source_image() {
        // tiny_set encodes the source index in pixel 0, so distinct pixel
        // values witness distinct source rows.
        let original = tiny_set(200, 4, 4, 4, 1);
        let synthetic = synthetic_twin(200, 4);
        let mixed = compose(&original, &synthetic, &spec(2, 1, 120, 5)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..mixed.len() {
            let key = (
                mixed.provenance()[i],
                (mixed.image(i)[[0, 0, 0]] * 255.0).round() as u32,
            );
            assert!(seen.insert(key), "duplicate source row at {i}: {key:?}");
        }
    }

    #[test]
    fn capacity_shortfall_names_the_class() {
        let original = tiny_set(40, 4, 4, 4, 1);
        let synthetic = synthetic_twin(8, 4);
        let err = compose(&original, &synthetic, &spec(1, 1, 32, 1)).unwrap_err();
        match err {
            Error::Capacity(msg) => {
                assert!(msg.contains("class 0"), "{msg}");
                assert!(msg.contains("synthetic"), "{msg}");
                assert!(msg.contains("short 2"), "{msg}");
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    /// Images of class `k` drawn from `counts[k]`, in class-major order.
    fn skewed_set(counts: &[usize], provenance: Provenance) -> crate::data::LabeledImageSet {
        let total: usize = counts.iter().sum();
        let mut labels = Vec::with_capacity(total);
        for (k, &n) in counts.iter().enumerate() {
            labels.extend(std::iter::repeat(k as u8).take(n));
        }
        let images = ndarray::Array4::from_shape_fn((total, 3, 3, 1), |(i, y, x, _)| {
            ((i * 9 + y * 3 + x) % 256) as f32 / 255.0
        });
        crate::data::LabeledImageSet::new(
            "skewed",
            images,
            labels,
            counts.len(),
            vec![provenance; total],
        )
        .unwrap()
    }

    #[test]
    fn unbalanced_mixing_survives_skewed_sources() {
        // Class 3 has 4 samples; a balanced 1:0 draw of 80 needs 20 of it.
        let original = skewed_set(&[30, 30, 30, 4], Provenance::Real);
        let synthetic = skewed_set(&[30, 30, 30, 30], Provenance::Synthetic);
        assert!(matches!(
            compose(&original, &synthetic, &spec(1, 0, 80, 9)),
            Err(Error::Capacity(_))
        ));

        let mixed = compose(&original, &synthetic, &unbalanced(1, 0, 80, 9)).unwrap();
        assert_eq!(mixed.len(), 80);
        let a = audit(&mixed);
        assert_eq!((a.n_original, a.n_synthetic), (80, 0));
    }

    #[test]
    fn unbalanced_layout_and_quotas() {
        let original = tiny_set(60, 4, 4, 4, 1);
        let synthetic = synthetic_twin(60, 4);
        let s = unbalanced(3, 1, 40, 2);
        let mixed = compose(&original, &synthetic, &s).unwrap();
        let a = audit(&mixed);
        assert_eq!((a.n_original, a.n_synthetic), (30, 10));
        // One real block then one synthetic block.
        for (i, &p) in mixed.provenance().iter().enumerate() {
            let want = if i < 30 { Provenance::Real } else { Provenance::Synthetic };
            assert_eq!(p, want, "index {i}");
        }
        let again = compose(&original, &synthetic, &s).unwrap();
        assert_eq!(mixed.images(), again.images());

        // Global shortfall still errors.
        let small = tiny_set(20, 4, 4, 4, 1);
        assert!(matches!(
            compose(&small, &synthetic, &unbalanced(1, 0, 30, 2)),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn spec_parses_from_config_syntax_with_balanced_default() {
        let s: MixtureSpec = toml::from_str("ratio = \"5:1\"\ntotal = 60000\nseed = 3").unwrap();
        assert_eq!(s.ratio, Ratio { original: 5, synthetic: 1 });
        assert!(s.class_balanced);
        let s: MixtureSpec =
            toml::from_str("ratio = \"10:1\"\ntotal = 60000\nseed = 3\nclass_balanced = false")
                .unwrap();
        assert!(!s.class_balanced);
    }

    #[test]
    fn composition_ratio_equivalents() {
        assert_eq!(Composition::Original.as_ratio(), Ratio { original: 1, synthetic: 0 });
        assert_eq!(Composition::Synthetic.as_ratio(), Ratio { original: 0, synthetic: 1 });
        assert_eq!(
            Composition::Mixed(Ratio { original: 5, synthetic: 1 }).as_ratio().to_string(),
            "5:1"
        );
    }

    #[test]
    fn audit_counts_an_arbitrary_set() {
        let set = tiny_set(10, 2, 4, 4, 1);
        let a = audit(&set);
        assert_eq!(a.n_original, 10);
        assert_eq!(a.n_synthetic, 0);
        assert_eq!(a.per_class, vec![(5, 0), (5, 0)]);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use crate::data::testutil::tiny_set;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn plan_conserves_totals(
            a in 0u32..12,
            b in 0u32..12,
            total in 1usize..5000,
            classes in 1usize..12,
        ) {
            prop_assume!(a + b > 0);
            prop_assume!(total >= classes);
            let spec = MixtureSpec::balanced(Ratio { original: a, synthetic: b }, total, 0);
            let p = plan(&spec, classes).unwrap();
            prop_assert_eq!(p.n_original + p.n_synthetic, total);
            let sum: usize = p.per_class.iter().map(|&(o, s)| o + s).sum();
            prop_assert_eq!(sum, total);
            let sum_o: usize = p.per_class.iter().map(|&(o, _)| o).sum();
            prop_assert_eq!(sum_o, p.n_original);
            // Class totals never differ by more than one unit.
            let totals: Vec<usize> = p.per_class.iter().map(|&(o, s)| o + s).collect();
            let (min, max) = (totals.iter().min().unwrap(), totals.iter().max().unwrap());
            prop_assert!(max - min <= 1);
            // Exact global share, checked against the rational definition:
            // |n_o * (a + b) - total * a| <= (a + b) / 2.
            let lhs = (p.n_original as i128) * ((a + b) as i128);
            let rhs = (total as i128) * (a as i128);
            prop_assert!((lhs - rhs).abs() * 2 <= (a + b) as i128);
        }

        #[test]
        fn compose_matches_plan_on_small_sets(
            a in 1u32..6,
            b in 1u32..6,
            total in 4usize..60,
            seed in 0u64..1000,
        ) {
            let original = tiny_set(120, 4, 3, 3, 1);
            let synthetic = {
                let base = tiny_set(120, 4, 3, 3, 1);
                crate::data::LabeledImageSet::new(
                    "syn",
                    base.images().clone(),
                    base.labels().to_vec(),
                    base.num_classes(),
                    vec![crate::data::Provenance::Synthetic; 120],
                ).unwrap()
            };
            let spec = MixtureSpec::balanced(Ratio { original: a, synthetic: b }, total, seed);
            let mixed = compose(&original, &synthetic, &spec).unwrap();
            prop_assert_eq!(mixed.len(), total);
            prop_assert_eq!(audit(&mixed), plan(&spec, 4).unwrap());

            // The unbalanced path must hit the same global quotas.
            let loose = MixtureSpec { class_balanced: false, ..spec };
            let mixed = compose(&original, &synthetic, &loose).unwrap();
            let a = audit(&mixed);
            prop_assert_eq!(mixed.len(), total);
            prop_assert_eq!(a.n_original, plan(&spec, 4).unwrap().n_original);
        }
    }
}
