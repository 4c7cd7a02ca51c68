//! Corpus and label files, the deterministic eval split, and a templated
//! restaurant-description corpus used for desk-scale experiments.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};

/// `field=value` pairs of one corpus line.
pub type Labels = BTreeMap<String, String>;

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-empty lines of a text file, trimmed.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn parse_labels(line: &str) -> Result<Labels> {
    line.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Format(format!("label `{kv}` is not field=value")))
        })
        .collect()
}

pub fn format_labels(labels: &Labels) -> String {
    labels
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn read_labels(path: &Path) -> Result<Vec<Labels>> {
    read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(parse_labels)
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Whether line `index` belongs to the held-out 10%.
pub fn is_eval_line(index: usize) -> bool {
    splitmix64(index as u64).is_multiple_of(10)
}

/// `(train indices, eval indices)` for a corpus of `len` lines. A corpus too
/// small to hash any line into the eval side evaluates on its last line.
pub fn split_indices(len: usize) -> (Vec<usize>, Vec<usize>) {
    let (mut eval, mut train): (Vec<usize>, Vec<usize>) = (0..len).partition(|&i| is_eval_line(i));
    if eval.is_empty() && len > 1 {
        eval.push(train.pop().expect("len > 1"));
    }
    if train.is_empty() {
        train = eval.clone();
    }
    (train, eval)
}

pub const NAMES: [&str; 100] = [
    "Vaults", "Aromi", "Cotto", "Zizzi", "Wildwood", "Strada", "Alimentum", "Browns", "Fitzbillies",
    "Clowns", "Giraffe", "Cocum", "Loch", "Midsummer", "Bibimbap", "Eagle", "Phoenix", "Mill",
    "Plough", "Punter", "Waterman", "Wrestlers", "Olive", "Taste", "Golden", "Cricketers",
    "Dumpling", "Fitzroy", "Hotspot", "Lighthouse", "Mermaid", "Nightingale", "Oakwood", "Pagoda",
    "Quayside", "Redwood", "Saffron", "Thistle", "Unicorn", "Velvet", "Windmill", "Yellowfin",
    "Zephyr", "Amber", "Brambles", "Cinnamon", "Driftwood", "Ember", "Foxglove", "Gingko", "Heron",
    "Ivy", "Juniper", "Kestrel", "Lantern", "Magnolia", "Nutmeg", "Orchid", "Pepper", "Quince",
    "Rosemary", "Sorrel", "Tamarind", "Umbra", "Vervain", "Wisteria", "Xanadu", "Yarrow", "Zinnia",
    "Acorn", "Bluebell", "Clover", "Damson", "Elderflower", "Fennel", "Garnet", "Hazel", "Indigo",
    "Jasmine", "Kingfisher", "Larkspur", "Marigold", "Nectar", "Opal", "Primrose", "Quill", "Rowan",
    "Sage", "Tansy", "Umber", "Verbena", "Walnut", "Wren", "Yew", "Zest", "Anchor", "Beacon",
    "Compass", "Dove", "Falcon",
];

pub const NEAR: [&str; 50] = [
    "Sicilia", "Rainbow", "Brazil", "Avalon", "Crowne", "Ranch", "Sorrento", "Yippee", "Bakers",
    "Portland", "Arcadia", "Rouge", "Meadow", "Harbor", "Willow", "Castle", "Station", "Museum",
    "Cathedral", "Library", "Stadium", "Theatre", "Market", "Gallery", "Pier", "Chapel", "Campus",
    "Fountain", "Observatory", "Aquarium", "Abbey", "Bazaar", "Boathouse", "Carousel", "Colonnade",
    "Dockyard", "Embankment", "Forum", "Granary", "Hippodrome", "Infirmary", "Jetty", "Kiosk",
    "Lido", "Marina", "Orangery", "Pavilion", "Quarry", "Rotunda", "Tannery",
];

pub const FOODS: [&str; 8] = [
    "Italian", "French", "Chinese", "Indian", "Japanese", "English", "Thai", "Mexican",
];
pub const AREAS: [&str; 2] = ["riverside", "centre"];
pub const PRICES: [&str; 4] = ["cheap", "moderate", "expensive", "affordable"];
pub const RATINGS: [&str; 4] = ["low", "average", "high", "excellent"];

/// One templated line and its labels. Every line mentions a name and a
/// food; the other fields appear with probability one half each.
pub fn toy_line<R: Rng + ?Sized>(rng: &mut R) -> (String, Labels) {
    let name = *NAMES.choose(rng).unwrap();
    let food = *FOODS.choose(rng).unwrap();
    let mut labels = Labels::new();
    labels.insert("name".into(), name.into());
    labels.insert("food".into(), food.into());
    let price = rng.random_bool(0.5).then(|| *PRICES.choose(rng).unwrap());
    let area = rng.random_bool(0.5).then(|| *AREAS.choose(rng).unwrap());
    let rating = rng.random_bool(0.5).then(|| *RATINGS.choose(rng).unwrap());
    let near = rng.random_bool(0.5).then(|| *NEAR.choose(rng).unwrap());
    let family = rng.random_bool(0.5).then(|| rng.random_bool(0.5));

    let mut head: Vec<String> = match (rng.random_range(0..3), price) {
        (0, Some(p)) => format!("{name} is a {p} {food} restaurant"),
        (1, Some(p)) => format!("{name} serves {p} {food} food"),
        (_, Some(p)) => format!("the {p} {name} offers {food} food"),
        (0, None) => format!("{name} is a {food} restaurant"),
        (1, None) => format!("{name} serves {food} food"),
        (_, None) => format!("there is a {food} place called {name}"),
    }
    .split(' ')
    .map(String::from)
    .collect();
    if let Some(p) = price {
        labels.insert("price".into(), p.into());
    }
    let mut tails: Vec<Vec<String>> = Vec::new();
    if let Some(a) = area {
        labels.insert("area".into(), a.into());
        tails.push(words(&format!("in the {a}")));
    }
    if let Some(n) = near {
        labels.insert("near".into(), n.into());
        tails.push(words(&format!("near {n}")));
    }
    if let Some(r) = rating {
        labels.insert("rating".into(), r.into());
        tails.push(words(&format!("with a {r} rating")));
    }
    if let Some(f) = family {
        labels.insert("family".into(), if f { "yes" } else { "no" }.into());
        tails.push(words(if f { "and is family friendly" } else { "and is not kid friendly" }));
    }
    tails.shuffle(rng);
    for t in tails {
        if head.len() + t.len() > 14 {
            continue;
        }
        head.extend(t);
    }
    // drop labels whose clause did not fit
    let text = head.join(" ");
    labels.retain(|k, v| match k.as_str() {
        "family" => text.contains("friendly"),
        _ => head.iter().any(|w| w == v),
    });
    (text, labels)
}

fn words(s: &str) -> Vec<String> {
    s.split(' ').map(String::from).collect()
}

/// `lines` templated lines with their labels.
pub fn toy_corpus<R: Rng + ?Sized>(lines: usize, rng: &mut R) -> (Vec<String>, Vec<Labels>) {
    (0..lines).map(|_| toy_line(rng)).unzip()
}

/// Every word the generator can emit, in a fixed order.
pub fn toy_words() -> Vec<&'static str> {
    let template = [
        "is", "a", "restaurant", "serves", "food", "the", "offers", "there", "place", "called", "in",
        "near", "with", "rating", "and", "family", "friendly", "not", "kid",
    ];
    let mut out: Vec<&str> = template.to_vec();
    for group in [&NAMES[..], &NEAR[..], &FOODS[..], &AREAS[..], &PRICES[..], &RATINGS[..]] {
        out.extend_from_slice(group);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Vocabulary;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_corpus_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (lines, labels) = toy_corpus(2000, &mut rng);
        let vocab = Vocabulary::from_corpus(lines.iter().map(String::as_str));
        assert!((180..=220).contains(&vocab.len()), "{}", vocab.len());
        assert_eq!(toy_words().len() + 4, vocab.len());
        let mut lens = std::collections::BTreeSet::new();
        for (line, lab) in lines.iter().zip(&labels) {
            let n = line.split(' ').count();
            assert!(n <= 14);
            lens.insert(n);
            assert!(line.split(' ').any(|w| w == lab["food"]));
            for (k, v) in lab {
                if k != "family" {
                    assert!(line.split(' ').any(|w| w == v), "{line} {k}={v}");
                }
            }
        }
        assert!(lens.len() >= 6, "{lens:?}");
    }

    #[test]
    fn labels_round_trip() {
        let l = parse_labels("food=Thai area=centre").unwrap();
        assert_eq!(l["food"], "Thai");
        assert_eq!(parse_labels(&format_labels(&l)).unwrap(), l);
        assert!(matches!(parse_labels("food"), Err(Error::Format(_))));
    }

    #[test]
    fn split_is_deterministic_and_about_ten_percent() {
        let (train, eval) = split_indices(10_000);
        assert_eq!(train.len() + eval.len(), 10_000);
        assert!((900..1100).contains(&eval.len()));
        assert_eq!(split_indices(10_000), (train, eval));
        let (t, e) = split_indices(3);
        assert!(!t.is_empty() && !e.is_empty());
    }

    #[test]
    fn missing_file_names_path() {
        let err = read_lines(Path::new("/nonexistent/corpus.txt")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/corpus.txt"));
    }
}
