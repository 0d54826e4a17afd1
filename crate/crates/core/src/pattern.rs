//! Subsets of access points encoded as bitmasks.
//!
//! Bit `i` of a [`Pattern`] is set when AP `i` (zero based) belongs to the
//! subset. Every per-pattern table in the crate is a flat `Vec` indexed by
//! [`Pattern::index`], so a network of `n` APs has `2^n` slots.

use std::fmt;

/// Largest AP count any pattern-indexed table accepts.
pub const MAX_APS: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Pattern(u32);

impl Pattern {
    pub const EMPTY: Pattern = Pattern(0);

    #[inline]
    pub const fn from_bits(bits: u32) -> Self {
        Pattern(bits)
    }

    /// All `n` APs.
    #[inline]
    pub fn full(n: usize) -> Self {
        debug_assert!(n <= MAX_APS);
        Pattern(((1u64 << n) - 1) as u32)
    }

    #[inline]
    pub fn singleton(i: usize) -> Self {
        Pattern(1 << i)
    }

    pub fn from_members<I: IntoIterator<Item = usize>>(members: I) -> Self {
        members.into_iter().fold(Pattern::EMPTY, |p, i| p.with(i))
    }

    #[inline]
    pub const fn bits(self) -> u32 {
        self.0
    }

    #[inline]
    pub const fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub const fn contains(self, i: usize) -> bool {
        self.0 >> i & 1 == 1
    }

    #[inline]
    pub const fn with(self, i: usize) -> Self {
        Pattern(self.0 | 1 << i)
    }

    #[inline]
    pub const fn without(self, i: usize) -> Self {
        Pattern(self.0 & !(1 << i))
    }

    #[inline]
    pub const fn union(self, other: Pattern) -> Self {
        Pattern(self.0 | other.0)
    }

    #[inline]
    pub const fn intersect(self, other: Pattern) -> Self {
        Pattern(self.0 & other.0)
    }

    #[inline]
    pub const fn minus(self, other: Pattern) -> Self {
        Pattern(self.0 & !other.0)
    }

    #[inline]
    pub const fn is_subset_of(self, other: Pattern) -> bool {
        self.0 & !other.0 == 0
    }

    #[inline]
    pub const fn is_empty(self) -> bool {
        self.0 == 0
    }

    #[inline]
    pub const fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    /// Member indices in increasing order.
    pub fn members(self) -> Members {
        Members(self.0)
    }

    /// Every subset of `{0, .., n-1}` in increasing bitmask order.
    pub fn all(n: usize) -> impl Iterator<Item = Pattern> + Clone {
        (0..1u32 << n).map(Pattern)
    }

    /// Every subset of `self`, including the empty set and `self`.
    pub fn subsets(self) -> Subsets {
        Subsets {
            mask: self.0,
            next: Some(0),
        }
    }
}

/// Number of patterns over `n` APs.
#[inline]
pub const fn pattern_count(n: usize) -> usize {
    1 << n
}

pub struct Members(u32);

impl Iterator for Members {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        if self.0 == 0 {
            return None;
        }
        let i = self.0.trailing_zeros() as usize;
        self.0 &= self.0 - 1;
        Some(i)
    }
}

/// Subset enumeration via the `(s - mask) & mask` successor trick.
pub struct Subsets {
    mask: u32,
    next: Option<u32>,
}

impl Iterator for Subsets {
    type Item = Pattern;

    fn next(&mut self) -> Option<Pattern> {
        let cur = self.next?;
        self.next = if cur == self.mask {
            None
        } else {
            Some(cur.wrapping_sub(self.mask) & self.mask)
        };
        Some(Pattern(cur))
    }
}

impl fmt::Display for Pattern {
    /// One-based member list, e.g. `{1,3}`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (k, i) in self.members().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}", i + 1)?;
        }
        f.write_str("}")
    }
}
