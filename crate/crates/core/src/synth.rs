//! Seeded synthetic text corpora for experiments that must run offline.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const NAMES: &[&str] = &[
    "Tom", "Lily", "Max", "Sue", "Ben", "Mia", "Sam", "Anna", "Leo", "Emma", "Jack", "Lucy", "Tim", "Zoe",
    "Finn", "Ruby",
];
const ANIMALS: &[&str] = &[
    "cat", "dog", "bird", "fox", "bunny", "frog", "bear", "duck", "mouse", "owl",
];
const ADJECTIVES: &[&str] = &[
    "little", "big", "happy", "sad", "brave", "shy", "kind", "silly", "small", "old",
];
const COLORS: &[&str] = &["red", "blue", "green", "yellow", "pink", "brown"];
const THINGS: &[&str] = &[
    "ball", "kite", "box", "hat", "book", "cake", "toy", "boat", "shoe", "cup",
];
const PLACES: &[&str] = &[
    "park", "garden", "forest", "house", "river", "beach", "school", "farm",
];
const FEELINGS: &[&str] = &["happy", "sad", "scared", "excited", "tired", "surprised"];
const VERBS: &[&str] = &["play", "run", "read", "sing", "jump", "dance", "swim", "draw"];

fn pick<'a, R: Rng + ?Sized>(rng: &mut R, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).expect("word lists are nonempty")
}

fn story<R: Rng + ?Sized>(rng: &mut R) -> String {
    let name = pick(rng, NAMES);
    let animal = pick(rng, ANIMALS);
    let adj = pick(rng, ADJECTIVES);
    let place = pick(rng, PLACES);
    let color = pick(rng, COLORS);
    let thing = pick(rng, THINGS);
    let friend = pick(rng, NAMES);
    let verb = pick(rng, VERBS);
    let feeling = pick(rng, FEELINGS);
    let mut s = format!("Once upon a time, there was a {adj} {animal} named {name}. ");
    s += &format!("{name} lived near the {place}. ");
    s += &format!("Every day, {name} liked to {verb} with {friend}. ");
    for _ in 0..rng.random_range(1..=3) {
        let s2 = match rng.random_range(0..4) {
            0 => format!("One day, {name} found a {color} {thing} in the {place}. "),
            1 => format!("{friend} said, \"Can we {} together?\" ", pick(rng, VERBS)),
            2 => format!("{name} felt {feeling} and went to the {}. ", pick(rng, PLACES)),
            _ => format!("The {thing} was {color} and very {}. ", pick(rng, ADJECTIVES)),
        };
        s += &s2;
    }
    s += &format!("In the end, {name} and {friend} were {}.\n", pick(rng, FEELINGS));
    s
}

/// About `bytes` bytes of short grammar-generated stories.
pub fn stories(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 512);
    while out.len() < bytes {
        out += &story(&mut rng);
    }
    out
}

/// Shops and the one item each sells; the item is a function of the place.
pub const SHOPS: &[(&str, &str)] = &[
    ("bakery", "bread"),
    ("market", "apples"),
    ("library", "a book"),
    ("florist", "roses"),
    ("pharmacy", "medicine"),
    ("toy shop", "a kite"),
    ("butcher", "sausages"),
    ("dairy", "cheese"),
];

/// One templated sentence and the byte span of its item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShopSentence {
    pub text: String,
    pub item: std::ops::Range<usize>,
}

pub fn shop_sentence<R: Rng + ?Sized>(rng: &mut R) -> ShopSentence {
    let name = pick(rng, NAMES);
    let (place, item) = SHOPS[rng.random_range(0..SHOPS.len())];
    let head = format!("{name} went to the {place} and bought ");
    let start = head.len();
    ShopSentence {
        text: format!("{head}{item}.\n"),
        item: start..start + item.len(),
    }
}

/// `count` templated shop sentences joined together.
pub fn shop_corpus(count: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| shop_sentence(&mut rng).text).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stories_are_seeded_and_sized() {
        let a = stories(10_000, 1);
        assert!(a.len() >= 10_000 && a.len() < 11_000);
        assert_eq!(a, stories(10_000, 1));
        assert_ne!(a, stories(10_000, 2));
        assert!(a.is_ascii());
    }

    #[test]
    fn shop_items_follow_places() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let s = shop_sentence(&mut rng);
            let item = &s.text[s.item.clone()];
            let (place, want) = SHOPS
                .iter()
                .find(|(p, _)| s.text.contains(&format!("the {p} ")))
                .unwrap();
            assert_eq!(item, *want, "{place}");
        }
        assert_eq!(shop_corpus(5, 3).lines().count(), 5);
    }
}
