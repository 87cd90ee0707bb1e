//! Ordered partitions of sequence positions.
//!
//! A [`Grouping`] splits the positions `0..n` into disjoint, non-empty groups.
//! Group order is significant: the tokens of group `k` are predicted from the
//! tokens of groups `0..k`. Every training stage and decoding mode is driven
//! by one of the constructors in this module.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GroupingError {
    #[error("invalid sequence length {0}: must be at least 1")]
    InvalidLength(usize),
    #[error("invalid group size {0}: must be at least 1")]
    InvalidGroupSize(usize),
    #[error("invalid infill spec: {0}")]
    InvalidSpec(String),
    #[error("invalid grouping: {0}")]
    Violation(#[from] Violation),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// The first property a grouping fails.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Violation {
    #[error("group {group} is empty")]
    EmptyGroup { group: usize },
    #[error("index {index} in group {group} is outside 0..{len}")]
    OutOfRange { index: usize, group: usize, len: usize },
    #[error("overlap at index {index} (groups {first} and {second})")]
    Overlap {
        index: usize,
        first: usize,
        second: usize,
    },
    #[error("indices {indices:?} are not covered")]
    Uncovered { indices: Vec<usize> },
}

/// An ordered list of position groups.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Grouping {
    groups: Vec<Vec<usize>>,
}

impl Grouping {
    /// Wraps raw groups without checking them; see [`Grouping::validate`].
    pub fn new(groups: Vec<Vec<usize>>) -> Self {
        Self { groups }
    }

    /// Builds a grouping and checks that it partitions `0..n`.
    pub fn try_new(groups: Vec<Vec<usize>>, n: usize) -> Result<Self, Violation> {
        let g = Self { groups };
        g.validate(n)?;
        Ok(g)
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn into_groups(self) -> Vec<Vec<usize>> {
        self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Number of positions listed across all groups.
    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Checks disjointness, coverage of `0..n` and non-empty groups.
    pub fn validate(&self, n: usize) -> Result<(), Violation> {
        let mut owner: Vec<Option<usize>> = vec![None; n];
        for (k, group) in self.groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Violation::EmptyGroup { group: k });
            }
            for &i in group {
                if i >= n {
                    return Err(Violation::OutOfRange {
                        index: i,
                        group: k,
                        len: n,
                    });
                }
                if let Some(first) = owner[i] {
                    return Err(Violation::Overlap {
                        index: i,
                        first,
                        second: k,
                    });
                }
                owner[i] = Some(k);
            }
        }
        let missing: Vec<usize> = owner
            .iter()
            .enumerate()
            .filter_map(|(i, o)| o.is_none().then_some(i))
            .collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Violation::Uncovered { indices: missing })
        }
    }

    /// Group index of every position. Assumes the grouping is valid for
    /// `self.len()` positions.
    pub fn group_of(&self) -> Vec<usize> {
        let mut rank = vec![0; self.len()];
        for (k, group) in self.groups.iter().enumerate() {
            for &i in group {
                rank[i] = k;
            }
        }
        rank
    }

    /// Serializes to one group per line of space-separated indices.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for group in &self.groups {
            let line: Vec<String> = group.iter().map(|i| i.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses the line format written by [`Grouping::to_text`]. Blank lines
    /// and lines starting with `#` are skipped. The result is validated
    /// against its own length.
    pub fn from_text(text: &str) -> Result<Self, GroupingError> {
        let mut groups = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let group = line
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<usize>().map_err(|e| GroupingError::Parse {
                        line: lineno + 1,
                        msg: format!("bad index {tok:?}: {e}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            groups.push(group);
        }
        let g = Self { groups };
        g.validate(g.len())?;
        Ok(g)
    }
}

impl fmt::Display for Grouping {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (k, group) in self.groups.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{{")?;
            for (j, i) in group.iter().enumerate() {
                if j > 0 {
                    write!(f, ",")?;
                }
                write!(f, "{i}")?;
            }
            write!(f, "}}")?;
        }
        write!(f, "]")
    }
}

/// Free-function form of [`Grouping::validate`].
pub fn validate(g: &Grouping, n: usize) -> Result<(), Violation> {
    g.validate(n)
}

/// `[{0}, {1}, ..., {n-1}]`: plain left-to-right factorization.
pub fn make_singleton(n: usize) -> Result<Grouping, GroupingError> {
    if n == 0 {
        return Err(GroupingError::InvalidLength(n));
    }
    Ok(Grouping::new((0..n).map(|i| vec![i]).collect()))
}

/// Contiguous blocks of `s` positions; the last block holds the remainder.
pub fn make_fixed(n: usize, s: usize) -> Result<Grouping, GroupingError> {
    if n == 0 {
        return Err(GroupingError::InvalidLength(n));
    }
    if s == 0 {
        return Err(GroupingError::InvalidGroupSize(s));
    }
    let positions: Vec<usize> = (0..n).collect();
    Ok(Grouping::new(
        positions.chunks(s).map(<[usize]>::to_vec).collect(),
    ))
}

/// Consecutive `s`-sized slices of a uniform random permutation of `0..n`.
pub fn make_permuted<R: Rng + ?Sized>(n: usize, s: usize, rng: &mut R) -> Result<Grouping, GroupingError> {
    if n == 0 {
        return Err(GroupingError::InvalidLength(n));
    }
    if s == 0 {
        return Err(GroupingError::InvalidGroupSize(s));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(Grouping::new(perm.chunks(s).map(<[usize]>::to_vec).collect()))
}

/// How the observed context of an infill problem is grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ContextGrouping {
    /// All of `L ∪ R` in one group.
    #[default]
    Single,
    /// `L ∪ R` in position order, sliced into groups of the infill group size.
    Split,
}

/// Left context, masked middle and right context of an infill problem.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InfillSpec {
    pub left: Vec<usize>,
    pub middle: Vec<usize>,
    pub right: Vec<usize>,
    pub group_size: usize,
    pub context: ContextGrouping,
}

impl InfillSpec {
    /// The usual layout: `left` positions, then `blanks` masked positions,
    /// then `right` positions.
    pub fn contiguous(left: usize, blanks: usize, right: usize, group_size: usize) -> Self {
        Self {
            left: (0..left).collect(),
            middle: (left..left + blanks).collect(),
            right: (left + blanks..left + blanks + right).collect(),
            group_size,
            context: ContextGrouping::Single,
        }
    }

    pub fn len(&self) -> usize {
        self.left.len() + self.middle.len() + self.right.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self) -> Result<(), GroupingError> {
        if self.middle.is_empty() {
            return Err(GroupingError::InvalidSpec("masked span is empty".into()));
        }
        if self.group_size == 0 {
            return Err(GroupingError::InvalidGroupSize(0));
        }
        let parts = Grouping::new(
            [&self.left, &self.middle, &self.right]
                .into_iter()
                .filter(|p| !p.is_empty())
                .cloned()
                .collect(),
        );
        parts
            .validate(self.len())
            .map_err(|v| GroupingError::InvalidSpec(v.to_string()))
    }
}

/// Groups an infill problem so that every context group precedes every
/// group touching the masked span.
///
/// Returns the grouping and `k0`, the number of context groups. Masked
/// positions are sliced left to right into groups of at most
/// `spec.group_size`.
pub fn make_infill(spec: &InfillSpec) -> Result<(Grouping, usize), GroupingError> {
    spec.check()?;
    let context: BTreeSet<usize> = spec.left.iter().chain(&spec.right).copied().collect();
    let context: Vec<usize> = context.into_iter().collect();
    let mut groups: Vec<Vec<usize>> = match spec.context {
        _ if context.is_empty() => Vec::new(),
        ContextGrouping::Single => vec![context],
        ContextGrouping::Split => context.chunks(spec.group_size).map(<[usize]>::to_vec).collect(),
    };
    let k0 = groups.len();
    let mut middle = spec.middle.clone();
    middle.sort_unstable();
    groups.extend(middle.chunks(spec.group_size).map(<[usize]>::to_vec));
    Ok((Grouping::new(groups), k0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sets(g: &Grouping) -> Vec<BTreeSet<usize>> {
        g.groups().iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn singleton_examples() {
        assert_eq!(make_singleton(3).unwrap().groups(), &[vec![0], vec![1], vec![2]]);
        assert_eq!(make_singleton(1).unwrap().groups(), &[vec![0]]);
        let g = make_singleton(5).unwrap();
        assert_eq!(g.num_groups(), 5);
        assert!(g.validate(5).is_ok());
        assert_eq!(make_singleton(0), Err(GroupingError::InvalidLength(0)));
    }

    #[test]
    fn fixed_examples() {
        assert_eq!(
            make_fixed(6, 3).unwrap().groups(),
            &[vec![0, 1, 2], vec![3, 4, 5]]
        );
        assert_eq!(
            make_fixed(7, 3).unwrap().groups(),
            &[vec![0, 1, 2], vec![3, 4, 5], vec![6]]
        );
        assert_eq!(make_fixed(4, 1).unwrap(), make_singleton(4).unwrap());
        assert_eq!(make_fixed(4, 0), Err(GroupingError::InvalidGroupSize(0)));
    }

    #[test]
    fn permuted_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = make_permuted(6, 2, &mut rng).unwrap();
        assert_eq!(g.num_groups(), 3);
        assert!(g.validate(6).is_ok());
        let mut all: Vec<usize> = g.groups().concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3, 4, 5]);

        let g = make_permuted(3, 3, &mut rng).unwrap();
        assert_eq!(sets(&g), vec![BTreeSet::from([0, 1, 2])]);

        let a = make_permuted(9, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = make_permuted(9, 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infill_examples() {
        let spec = InfillSpec {
            left: vec![0, 1],
            middle: vec![2, 3],
            right: vec![4],
            group_size: 1,
            context: ContextGrouping::Single,
        };
        let (g, k0) = make_infill(&spec).unwrap();
        assert_eq!(k0, 1);
        assert_eq!(g.groups(), &[vec![0, 1, 4], vec![2], vec![3]]);

        let spec = InfillSpec::contiguous(1, 4, 1, 2);
        let (g, k0) = make_infill(&spec).unwrap();
        assert_eq!(&g.groups()[k0..], &[vec![1, 2], vec![3, 4]]);
        assert!(g.validate(6).is_ok());

        let split = InfillSpec {
            context: ContextGrouping::Split,
            ..InfillSpec::contiguous(3, 2, 2, 2)
        };
        let (g, k0) = make_infill(&split).unwrap();
        assert_eq!(k0, 3);
        assert_eq!(g.groups()[..k0], [vec![0, 1], vec![2, 5], vec![6]]);
    }

    #[test]
    fn infill_rejects_bad_specs() {
        let empty = InfillSpec::contiguous(2, 0, 2, 1);
        assert!(matches!(make_infill(&empty), Err(GroupingError::InvalidSpec(_))));
        let overlapping = InfillSpec {
            left: vec![0, 1],
            middle: vec![1, 2],
            right: vec![],
            group_size: 1,
            context: ContextGrouping::Single,
        };
        assert!(make_infill(&overlapping).is_err());
    }

    #[test]
    fn figure_one_grouping_is_valid() {
        // {1,2,3}, {5,6}, {4} in 1-based positions.
        let g = Grouping::new(vec![vec![0, 1, 2], vec![4, 5], vec![3]]);
        assert!(validate(&g, 6).is_ok());
    }

    #[test]
    fn validate_reports() {
        assert!(validate(&Grouping::new(vec![vec![0, 1], vec![2]]), 3).is_ok());
        assert_eq!(
            validate(&Grouping::new(vec![vec![0], vec![0, 1]]), 2),
            Err(Violation::Overlap {
                index: 0,
                first: 0,
                second: 1
            })
        );
        assert_eq!(
            validate(&Grouping::new(vec![vec![0], vec![2]]), 3),
            Err(Violation::Uncovered { indices: vec![1] })
        );
        assert_eq!(
            validate(&Grouping::new(vec![vec![0], vec![]]), 1),
            Err(Violation::EmptyGroup { group: 1 })
        );
        assert!(matches!(
            validate(&Grouping::new(vec![vec![0, 3]]), 2),
            Err(Violation::OutOfRange { index: 3, .. })
        ));
    }

    #[test]
    fn text_format() {
        let g = Grouping::new(vec![vec![0, 1, 2], vec![4, 5], vec![3]]);
        assert_eq!(g.to_text(), "0 1 2\n4 5\n3\n");
        assert_eq!(Grouping::from_text(&g.to_text()).unwrap(), g);
        assert_eq!(Grouping::from_text("# fig 1\n0 1 2\n\n4 5\n3\n").unwrap(), g);
        assert!(matches!(
            Grouping::from_text("0 x\n"),
            Err(GroupingError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            Grouping::from_text("0 1\n1\n"),
            Err(GroupingError::Violation(_))
        ));
    }

    proptest! {
        #[test]
        fn permuted_always_valid(n in 1usize..64, s in 1usize..10, seed: u64) {
            let g = make_permuted(n, s, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            prop_assert!(g.validate(n).is_ok());
            prop_assert_eq!(g.num_groups(), n.div_ceil(s));
        }

        #[test]
        fn fixed_group_count(n in 1usize..200, s in 1usize..20) {
            let g = make_fixed(n, s).unwrap();
            prop_assert!(g.validate(n).is_ok());
            prop_assert_eq!(g.num_groups(), n.div_ceil(s));
            prop_assert_eq!(make_fixed(n, 1).unwrap(), make_singleton(n).unwrap());
        }

        #[test]
        fn infill_context_precedes_masked(
            left in 0usize..8,
            blanks in 1usize..8,
            right in 0usize..8,
            s in 1usize..5,
            split: bool,
        ) {
            let spec = InfillSpec {
                context: if split { ContextGrouping::Split } else { ContextGrouping::Single },
                ..InfillSpec::contiguous(left, blanks, right, s)
            };
            let (g, k0) = make_infill(&spec).unwrap();
            prop_assert!(g.validate(spec.len()).is_ok());
            let masked: BTreeSet<usize> = spec.middle.iter().copied().collect();
            for (k, group) in g.groups().iter().enumerate() {
                let touches = group.iter().any(|i| masked.contains(i));
                prop_assert_eq!(touches, k >= k0);
                if touches {
                    prop_assert!(group.len() <= s);
                }
            }
        }
    }
}
