//! Synthetic marketplace generator with known latent structure.
//!
//! Every downstream stage is testable at desk scale because the generator
//! plants recoverable signals: disjoint topic vocabularies per subcategory,
//! user affinities concentrated on one category, a location-cluster kernel
//! on interactions, and image features that are a fixed random linear
//! expansion of each item's topic mixture.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datamodel::{
    self, Ad, AdCorpus, Event, ImageFeatures, SignalKind, ADS_FILE, EVENTS_FILE, IMAGES_FILE,
    SECONDS_PER_DAY,
};
use crate::error::{Error, Result};

/// Fixed "now" for synthetic timestamps; keeps outputs independent of the
/// wall clock.
pub const SYNTH_NOW: i64 = 1_700_000_000;

/// Fraction of the vocabulary shared across all subcategories.
const COMMON_VOCAB_FRACTION: f64 = 0.2;
/// Probability that a title/description token comes from the owning topic
/// rather than the common vocabulary.
const TOPIC_TOKEN_PROB: f64 = 0.8;
/// Probability that a casual interaction follows the user's affinity
/// rather than a uniformly random subcategory.
const AFFINITY_PROB: f64 = 0.9;
/// Relative weight of items outside the user's home location cluster for
/// casual signals. Kept small so behavior carries a location signal that
/// content cannot see.
const CROSS_CLUSTER_WEIGHT: f64 = 0.1;
/// Conversion signals are deliberate: no exploration, and a sharper
/// location kernel.
const CONVERSION_CROSS_CLUSTER_WEIGHT: f64 = 0.02;
/// Share of a user's affinity mass on a secondary category. Cross-category
/// taste shows up in behavior but is invisible to content features.
const SECONDARY_CATEGORY_MASS: f64 = 0.35;
/// Every subcategory's topic vocabulary is split into two style halves;
/// items express one style in their text, and users prefer one style.
/// Style is planted in content (hence recoverable from text and image
/// features) while behavior only hints at it, so content genuinely
/// complements collaborative filtering.
const CROSS_STYLE_WEIGHT_DELIBERATE: f64 = 0.15;
const CROSS_STYLE_WEIGHT_CASUAL: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub n_subcats_per_category: usize,
    pub n_postcodes: usize,
    pub n_location_clusters: usize,
    pub vocab_size: usize,
    pub title_len: usize,
    pub desc_len: usize,
    pub image_dim: usize,
    pub days: u32,
    pub seed: u64,
    pub cold_start_fraction: f64,
    /// Mean behavior events per user.
    pub events_per_user: usize,
    /// Standard deviation of the additive Gaussian image-feature noise.
    pub image_noise: f64,
    /// Relative signal frequencies, indexed like [`SignalKind::ALL`].
    pub funnel: [f64; 7],
}

impl Default for SynthConfig {
    /// The standard desk-scale fixture: behavior is the dominant generative
    /// signal (users stick to one category but spread over its
    /// subcategories and home location cluster, which text alone cannot
    /// resolve) and 20% of items are cold-start.
    fn default() -> Self {
        SynthConfig {
            n_users: 300,
            n_items: 600,
            n_categories: 4,
            n_subcats_per_category: 3,
            n_postcodes: 16,
            n_location_clusters: 4,
            vocab_size: 800,
            title_len: 6,
            desc_len: 30,
            image_dim: 2048,
            days: 14,
            seed: 42,
            cold_start_fraction: 0.2,
            events_per_user: 70,
            image_noise: 0.5,
            // view, interest, follow, favorite, message, phone, contact
            funnel: [0.49, 0.12, 0.05, 0.12, 0.12, 0.07, 0.03],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("n_subcats_per_category", self.n_subcats_per_category),
            ("n_postcodes", self.n_postcodes),
            ("n_location_clusters", self.n_location_clusters),
            ("vocab_size", self.vocab_size),
            ("title_len", self.title_len),
            ("desc_len", self.desc_len),
            ("image_dim", self.image_dim),
            ("days", self.days as usize),
            ("events_per_user", self.events_per_user),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.cold_start_fraction) {
            return Err(Error::Config("cold_start_fraction must be in [0,1]".into()));
        }
        for (kind, p) in SignalKind::ALL.iter().zip(&self.funnel) {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::Config(format!(
                    "funnel probability for {} must be in [0,1]",
                    kind.token()
                )));
            }
        }
        if self.funnel.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config("funnel probabilities sum to zero".into()));
        }
        if self.image_noise < 0.0 {
            return Err(Error::Config("image_noise must be >= 0".into()));
        }
        if self.n_subcats() >= self.vocab_size {
            return Err(Error::Config(
                "vocab_size too small for the subcategory count".into(),
            ));
        }
        Ok(())
    }

    pub fn n_subcats(&self) -> usize {
        self.n_categories * self.n_subcats_per_category
    }

    pub fn n_cold(&self) -> usize {
        (self.cold_start_fraction * self.n_items as f64).floor() as usize
    }

    /// Parses a `key=value` config file; keys not present keep their
    /// default value. Funnel keys are `funnel_<signal token>`.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = SynthConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(path, lineno + 1, "expected key=value"))?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| Error::parse(path, lineno + 1, format!("bad {what} {value:?}"));
            macro_rules! set_usize {
                ($field:ident) => {
                    cfg.$field = value.parse().map_err(|_| bad("count"))?
                };
            }
            match key {
                "n_users" => set_usize!(n_users),
                "n_items" => set_usize!(n_items),
                "n_categories" => set_usize!(n_categories),
                "n_subcats_per_category" => set_usize!(n_subcats_per_category),
                "n_postcodes" => set_usize!(n_postcodes),
                "n_location_clusters" => set_usize!(n_location_clusters),
                "vocab_size" => set_usize!(vocab_size),
                "title_len" => set_usize!(title_len),
                "desc_len" => set_usize!(desc_len),
                "image_dim" => set_usize!(image_dim),
                "events_per_user" => set_usize!(events_per_user),
                "days" => cfg.days = value.parse().map_err(|_| bad("count"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "cold_start_fraction" => {
                    cfg.cold_start_fraction = value.parse().map_err(|_| bad("fraction"))?
                }
                "image_noise" => cfg.image_noise = value.parse().map_err(|_| bad("sigma"))?,
                _ => {
                    if let Some(token) = key.strip_prefix("funnel_") {
                        let kind = SignalKind::parse(token).ok_or_else(|| {
                            Error::parse(path, lineno + 1, format!("unknown signal {token:?}"))
                        })?;
                        let idx = SignalKind::ALL.iter().position(|&k| k == kind).unwrap();
                        cfg.funnel[idx] = value.parse().map_err(|_| bad("probability"))?;
                    } else {
                        return Err(Error::parse(
                            path,
                            lineno + 1,
                            format!("unknown config key {key:?}"),
                        ));
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("n_users={}\n", self.n_users));
        out.push_str(&format!("n_items={}\n", self.n_items));
        out.push_str(&format!("n_categories={}\n", self.n_categories));
        out.push_str(&format!(
            "n_subcats_per_category={}\n",
            self.n_subcats_per_category
        ));
        out.push_str(&format!("n_postcodes={}\n", self.n_postcodes));
        out.push_str(&format!("n_location_clusters={}\n", self.n_location_clusters));
        out.push_str(&format!("vocab_size={}\n", self.vocab_size));
        out.push_str(&format!("title_len={}\n", self.title_len));
        out.push_str(&format!("desc_len={}\n", self.desc_len));
        out.push_str(&format!("image_dim={}\n", self.image_dim));
        out.push_str(&format!("days={}\n", self.days));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("cold_start_fraction={}\n", self.cold_start_fraction));
        out.push_str(&format!("events_per_user={}\n", self.events_per_user));
        out.push_str(&format!("image_noise={}\n", self.image_noise));
        for (kind, p) in SignalKind::ALL.iter().zip(&self.funnel) {
            out.push_str(&format!("funnel_{}={}\n", kind.token(), p));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// A generated marketplace: ad corpus, behavior log and image features.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub ads: Vec<Ad>,
    pub events: Vec<Event>,
    pub images: ImageFeatures,
}

impl SynthData {
    pub fn corpus(&self) -> AdCorpus {
        AdCorpus::from_ads(self.ads.clone()).expect("generated corpus is valid")
    }

    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        datamodel::write_corpus(&dir.join(ADS_FILE), &self.ads)?;
        datamodel::write_events(&dir.join(EVENTS_FILE), &self.events)?;
        datamodel::write_image_features(&dir.join(IMAGES_FILE), &self.images)
    }
}

struct ItemInfo {
    subcat: usize,
    style: usize,
    postcode_idx: usize,
}

/// Generates a synthetic marketplace. Deterministic given `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let n_subcats = cfg.n_subcats();
    let n_common = ((cfg.vocab_size as f64 * COMMON_VOCAB_FRACTION) as usize).max(1);
    let per_topic = (cfg.vocab_size - n_common) / n_subcats;
    let per_style = per_topic / 2;
    if per_style == 0 {
        return Err(Error::Config(
            "vocab_size leaves no tokens per subcategory style".into(),
        ));
    }
    let token = |idx: usize| format!("w{idx:05}");
    // tokens [0, n_common) are shared; topic s owns
    // [n_common + s*per_topic, n_common + (s+1)*per_topic), and each
    // style owns one half of that slice
    let topic_token = |rng: &mut ChaCha8Rng, subcat: usize, style: usize| -> String {
        if rng.random::<f64>() < TOPIC_TOKEN_PROB {
            token(n_common + subcat * per_topic + style * per_style + rng.random_range(0..per_style))
        } else {
            token(rng.random_range(0..n_common))
        }
    };

    let postcode_label = |idx: usize| format!("p{idx:03}");
    let cluster_of = |postcode_idx: usize| postcode_idx * cfg.n_location_clusters / cfg.n_postcodes;

    // --- items ---
    let id_width = cfg.n_items.to_string().len();
    let mut ads = Vec::with_capacity(cfg.n_items);
    let mut infos = Vec::with_capacity(cfg.n_items);
    // topic mixture per item over the 2*n_subcats style cells plus one
    // common cell at the end
    let n_cells = 2 * n_subcats + 1;
    let mut mixtures: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_items);
    for idx in 0..cfg.n_items {
        let subcat = idx % n_subcats;
        let style = (idx / n_subcats) % 2;
        let postcode_idx = rng.random_range(0..cfg.n_postcodes);
        let mut counts = vec![0usize; n_cells];
        let draw_text = |rng: &mut ChaCha8Rng, len: usize, counts: &mut Vec<usize>| {
            let mut words = Vec::with_capacity(len);
            for _ in 0..len {
                let w = topic_token(rng, subcat, style);
                let widx: usize = w[1..].parse().unwrap();
                if widx < n_common {
                    counts[2 * n_subcats] += 1;
                } else {
                    counts[2 * subcat + style] += 1;
                }
                words.push(w);
            }
            words.join(" ")
        };
        let title = draw_text(&mut rng, cfg.title_len, &mut counts);
        let description = draw_text(&mut rng, cfg.desc_len, &mut counts);
        let total = counts.iter().sum::<usize>() as f64;
        mixtures.push(counts.iter().map(|&c| c as f64 / total).collect());
        ads.push(Ad {
            item_id: format!("i{idx:0id_width$}"),
            title,
            description,
            category: format!("cat{}", subcat / cfg.n_subcats_per_category),
            subcategory: format!("sub{subcat:03}"),
            postcode: postcode_label(postcode_idx),
            created_at: SYNTH_NOW - rng.random_range(0..cfg.days as i64 * SECONDS_PER_DAY),
            active: true,
        });
        infos.push(ItemInfo {
            subcat,
            style,
            postcode_idx,
        });
    }

    // --- cold set: a seeded random sample of exactly n_cold items ---
    let n_cold = cfg.n_cold();
    let mut order: Vec<usize> = (0..cfg.n_items).collect();
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut is_cold = vec![false; cfg.n_items];
    for &idx in order.iter().take(n_cold) {
        is_cold[idx] = true;
    }
    let warm: Vec<usize> = (0..cfg.n_items).filter(|&i| !is_cold[i]).collect();

    // warm items per subcategory, split by location cluster lookup
    let mut warm_by_subcat: Vec<Vec<usize>> = vec![Vec::new(); n_subcats];
    for &i in &warm {
        warm_by_subcat[infos[i].subcat].push(i);
    }

    // --- image features: fixed random expansion of the topic mixture ---
    let mut images = ImageFeatures::new(cfg.image_dim);
    let normal = StandardNormal;
    let expansion: Vec<f64> = (0..cfg.image_dim * n_cells)
        .map(|_| normal.sample(&mut rng))
        .collect();
    for (idx, ad) in ads.iter().enumerate() {
        let t = &mixtures[idx];
        let mut feature = Vec::with_capacity(cfg.image_dim);
        for d in 0..cfg.image_dim {
            let row = &expansion[d * n_cells..(d + 1) * n_cells];
            let mut v: f64 = row.iter().zip(t).map(|(a, b)| a * b).sum();
            let noise: f64 = normal.sample(&mut rng);
            v += cfg.image_noise * noise;
            feature.push(v as f32);
        }
        images.push(ad.item_id.clone(), &feature)?;
    }

    // --- users: a primary and (when possible) a secondary category, with
    // affinity spread over their subcategories, plus a home location
    // cluster ---
    struct UserInfo {
        affinity: Vec<(usize, f64)>, // (subcat, cumulative weight)
        home_cluster: usize,
        style: usize,
    }
    let mut users = Vec::with_capacity(cfg.n_users);
    for _ in 0..cfg.n_users {
        let primary = rng.random_range(0..cfg.n_categories);
        let secondary = if cfg.n_categories > 1 {
            let mut c = rng.random_range(0..cfg.n_categories - 1);
            if c >= primary {
                c += 1;
            }
            Some(c)
        } else {
            None
        };
        let mut raw: Vec<(usize, f64)> = Vec::new();
        let mut push_cat = |rng: &mut ChaCha8Rng, cat: usize, mass: f64, raw: &mut Vec<(usize, f64)>| {
            let weights: Vec<f64> = (0..cfg.n_subcats_per_category)
                .map(|_| -(rng.random::<f64>().max(1e-12)).ln())
                .collect();
            let total: f64 = weights.iter().sum();
            for (k, w) in weights.iter().enumerate() {
                raw.push((cat * cfg.n_subcats_per_category + k, mass * w / total));
            }
        };
        match secondary {
            Some(second) => {
                push_cat(&mut rng, primary, 1.0 - SECONDARY_CATEGORY_MASS, &mut raw);
                push_cat(&mut rng, second, SECONDARY_CATEGORY_MASS, &mut raw);
            }
            None => push_cat(&mut rng, primary, 1.0, &mut raw),
        }
        let mut acc = 0.0;
        let affinity = raw
            .into_iter()
            .map(|(s, w)| {
                acc += w;
                (s, acc)
            })
            .collect();
        users.push(UserInfo {
            affinity,
            home_cluster: rng.random_range(0..cfg.n_location_clusters),
            style: rng.random_range(0..2),
        });
    }

    // --- events ---
    let funnel_total: f64 = cfg.funnel.iter().sum();
    let draw_signal = |rng: &mut ChaCha8Rng| -> SignalKind {
        let r = rng.random::<f64>() * funnel_total;
        let mut acc = 0.0;
        for (kind, p) in SignalKind::ALL.iter().zip(&cfg.funnel) {
            acc += p;
            if r < acc {
                return *kind;
            }
        }
        SignalKind::ContactSeller
    };
    let draw_ts =
        |rng: &mut ChaCha8Rng| SYNTH_NOW - rng.random_range(0..cfg.days as i64 * SECONDS_PER_DAY);
    let user_label_width = cfg.n_users.to_string().len();
    let user_id = |u: usize| format!("u{u:0user_label_width$}");

    let mut events = Vec::new();
    // coverage pass: every warm item gets at least one event, so the cold
    // item count is exact
    for &item in &warm {
        let u = rng.random_range(0..cfg.n_users);
        events.push(Event {
            user: user_id(u),
            item: ads[item].item_id.clone(),
            signal: draw_signal(&mut rng),
            ts: draw_ts(&mut rng),
        });
    }
    // volume pass: the signal kind is drawn first (so frequencies follow
    // the funnel exactly), then the item. Conversion signals are
    // deliberate: they always follow the user's affinity and use a
    // sharper location kernel than casual views.
    let target_total = cfg.n_users * cfg.events_per_user;
    let remaining = target_total.saturating_sub(events.len());
    for _ in 0..remaining {
        if warm.is_empty() {
            break;
        }
        let u = rng.random_range(0..cfg.n_users);
        let user = &users[u];
        let signal = draw_signal(&mut rng);
        let deliberate = signal.is_conversion();
        let subcat = if deliberate || rng.random::<f64>() < AFFINITY_PROB {
            let r = rng.random::<f64>();
            user.affinity
                .iter()
                .find(|(_, acc)| r < *acc)
                .map(|(s, _)| *s)
                .unwrap_or(user.affinity.last().unwrap().0)
        } else {
            rng.random_range(0..n_subcats)
        };
        let cross_weight = if deliberate {
            CONVERSION_CROSS_CLUSTER_WEIGHT
        } else {
            CROSS_CLUSTER_WEIGHT
        };
        let cross_style = if deliberate {
            CROSS_STYLE_WEIGHT_DELIBERATE
        } else {
            CROSS_STYLE_WEIGHT_CASUAL
        };
        let pool = if warm_by_subcat[subcat].is_empty() {
            &warm
        } else {
            &warm_by_subcat[subcat]
        };
        let kernel = |i: usize| {
            let location = if cluster_of(infos[i].postcode_idx) == user.home_cluster {
                1.0
            } else {
                cross_weight
            };
            let style = if infos[i].style == user.style {
                1.0
            } else {
                cross_style
            };
            location * style
        };
        let total_w: f64 = pool.iter().map(|&i| kernel(i)).sum();
        let r = rng.random::<f64>() * total_w;
        let mut acc = 0.0;
        let mut chosen = pool[pool.len() - 1];
        for &i in pool {
            acc += kernel(i);
            if r < acc {
                chosen = i;
                break;
            }
        }
        events.push(Event {
            user: user_id(u),
            item: ads[chosen].item_id.clone(),
            signal,
            ts: draw_ts(&mut rng),
        });
    }
    events.sort_by(|a, b| {
        (a.ts, &a.user, &a.item, a.signal.token()).cmp(&(b.ts, &b.user, &b.item, b.signal.token()))
    });

    Ok(SynthData {
        ads,
        events,
        images,
    })
}
