//! n-way k-shot episode sampling with random class-to-slot assignment.

use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;

use crate::datasets::{preprocess, AugmentParams, Item, LabeledImageSet, Mode};
use crate::error::{validation, Error, Result};

/// One few-shot task: `n * k` labelled supports grouped by class, plus a
/// query drawn from one of the `n` classes.
#[derive(Clone, Debug)]
pub struct Episode {
    pub n: usize,
    pub k: usize,
    pub n_max: usize,
    /// Class ids of the episode, in sampling order.
    pub classes: Vec<usize>,
    /// `slots[i]` is the label slot of `classes[i]`.
    pub slots: Vec<usize>,
    /// `k` supports of `classes[0]`, then `k` of `classes[1]`, and so on.
    pub supports: Vec<Item>,
    pub query: Item,
}

impl Episode {
    pub fn m(&self) -> usize {
        self.supports.len()
    }

    pub fn slot_of(&self, class_id: usize) -> Option<usize> {
        self.classes
            .iter()
            .position(|&c| c == class_id)
            .map(|i| self.slots[i])
    }

    pub fn support_slots(&self) -> Vec<usize> {
        self.supports
            .iter()
            .map(|s| self.slot_of(s.class_id).expect("support class belongs to the episode"))
            .collect()
    }

    pub fn query_class(&self) -> usize {
        self.query.class_id
    }

    pub fn query_slot(&self) -> usize {
        self.slot_of(self.query.class_id)
            .expect("query class belongs to the episode")
    }

    /// Slots in use, ascending.
    pub fn active_slots(&self) -> Vec<usize> {
        let mut s = self.slots.clone();
        s.sort_unstable();
        s
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.query.image.size()
    }

    /// Support images followed by the query image.
    pub fn images(&self) -> impl Iterator<Item = &Arc<crate::datasets::Image>> {
        self.supports.iter().map(|s| &s.image).chain(std::iter::once(&self.query.image))
    }

    /// Applies `preprocess` to every image, supports first, from one stream.
    pub fn preprocessed<R: Rng + ?Sized>(
        &self,
        params: &AugmentParams,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Episode> {
        let mut out = self.clone();
        for item in out.supports.iter_mut().chain(std::iter::once(&mut out.query)) {
            item.image = Arc::new(preprocess(&item.image, params, mode, rng)?);
        }
        Ok(out)
    }
}

/// Samples an n-way k-shot episode. Every class contributes `k` distinct
/// supports; the query is a further distinct image of one of the classes.
pub fn sample_episode<R: Rng + ?Sized>(
    set: &LabeledImageSet,
    n: usize,
    k: usize,
    n_max: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n == 0 || k == 0 {
        return Err(validation("episodes need n >= 1 and k >= 1"));
    }
    if n > n_max {
        return Err(validation(format!("n = {n} exceeds the {n_max} label slots")));
    }
    if n > set.num_classes() {
        return Err(Error::Capacity(format!(
            "{n}-way episodes need {n} classes, the set has {}",
            set.num_classes()
        )));
    }
    let classes = sample(rng, set.num_classes(), n).into_vec();
    let query_pos = rng.gen_range(0..n);
    let mut supports = Vec::with_capacity(n * k);
    let mut query = None;
    for (i, &c) in classes.iter().enumerate() {
        let pool = set.class_items(c);
        let need = if i == query_pos { k + 1 } else { k };
        if pool.len() < need {
            return Err(Error::Capacity(format!(
                "class {} has {} images, {need} needed",
                set.class_names()[c],
                pool.len()
            )));
        }
        let picks = sample(rng, pool.len(), need).into_vec();
        supports.extend(picks[..k].iter().map(|&j| set.items()[pool[j]].clone()));
        if i == query_pos {
            query = Some(set.items()[pool[picks[k]]].clone());
        }
    }
    let slots = sample(rng, n_max, n).into_vec();
    Ok(Episode {
        n,
        k,
        n_max,
        classes,
        slots,
        supports,
        query: query.expect("query class is among the sampled classes"),
    })
}

#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub episodes: Vec<Episode>,
}

impl EpisodeBatch {
    pub fn batch_size(&self) -> usize {
        self.episodes.len()
    }

    pub fn n(&self) -> usize {
        self.episodes[0].n
    }

    pub fn k(&self) -> usize {
        self.episodes[0].k
    }

    /// Supports per episode.
    pub fn m(&self) -> usize {
        self.episodes[0].m()
    }

    pub fn query_slots(&self) -> Vec<usize> {
        self.episodes.iter().map(Episode::query_slot).collect()
    }
}

pub fn batch_episodes(episodes: Vec<Episode>) -> Result<EpisodeBatch> {
    let first = episodes
        .first()
        .ok_or_else(|| validation("cannot batch zero episodes"))?;
    let key = (first.n, first.k, first.n_max, first.image_size(), first.query.image.channels);
    for e in &episodes[1..] {
        if (e.n, e.k, e.n_max, e.image_size(), e.query.image.channels) != key {
            return Err(validation(format!(
                "episode shapes differ: (n, k, n_max, size) {:?} vs {:?}",
                (e.n, e.k, e.n_max, e.image_size()),
                (key.0, key.1, key.2, key.3)
            )));
        }
    }
    Ok(EpisodeBatch { episodes })
}

pub fn one_hot(slot: usize, n_max: usize) -> Result<Vec<f64>> {
    if slot >= n_max {
        return Err(validation(format!("slot {slot} outside 0..{n_max}")));
    }
    let mut v = vec![0.0; n_max];
    v[slot] = 1.0;
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{Image, Item, LabeledImageSet};
    use crate::seed::rng_from;
    use proptest::prelude::*;

    fn set(classes: usize, per_class: usize) -> LabeledImageSet {
        let mut items = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                items.push(Item {
                    id: format!("{c}/{i}"),
                    class_id: c,
                    image: Arc::new(Image::filled(2, 2, 3, (c * 100 + i) as f32 / 1e4)),
                });
            }
        }
        LabeledImageSet::new(items, (0..classes).map(|c| c.to_string()).collect()).unwrap()
    }

    #[test]
    fn ten_way_five_shot_counts() {
        let e = sample_episode(&set(12, 8), 10, 5, 10, &mut rng_from(0)).unwrap();
        assert_eq!(e.m(), 50);
        assert!(e.classes.contains(&e.query_class()));
    }

    #[test]
    fn five_way_one_shot() {
        let e = sample_episode(&set(7, 2), 5, 1, 10, &mut rng_from(1)).unwrap();
        assert_eq!(e.m(), 5);
        assert!(e.classes.contains(&e.query_class()));
    }

    #[test]
    fn query_class_with_only_k_images_is_capacity_error() {
        let s = set(1, 3);
        let r = sample_episode(&s, 1, 3, 10, &mut rng_from(0));
        assert!(matches!(r, Err(Error::Capacity(_))));
        assert!(matches!(
            sample_episode(&s, 2, 1, 10, &mut rng_from(0)),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn n_above_n_max_is_rejected() {
        assert!(matches!(
            sample_episode(&set(12, 3), 11, 1, 10, &mut rng_from(0)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn batching_rules() {
        let s = set(6, 4);
        let eps: Vec<Episode> = (0..16)
            .map(|i| sample_episode(&s, 5, 2, 10, &mut rng_from(i)).unwrap())
            .collect();
        assert_eq!(batch_episodes(eps.clone()).unwrap().batch_size(), 16);
        assert_eq!(batch_episodes(eps[..1].to_vec()).unwrap().batch_size(), 1);
        let mut mixed = eps[..2].to_vec();
        mixed.push(sample_episode(&s, 5, 3, 10, &mut rng_from(99)).unwrap());
        assert!(matches!(batch_episodes(mixed), Err(Error::Validation(_))));
        assert!(batch_episodes(Vec::new()).is_err());
    }

    #[test]
    fn one_hot_definition() {
        assert_eq!(one_hot(0, 10).unwrap(), [1., 0., 0., 0., 0., 0., 0., 0., 0., 0.]);
        assert_eq!(one_hot(9, 10).unwrap()[9], 1.0);
        assert_eq!(one_hot(9, 10).unwrap().iter().sum::<f64>(), 1.0);
        assert!(one_hot(10, 10).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = set(9, 5);
        let a = sample_episode(&s, 4, 3, 10, &mut rng_from(5)).unwrap();
        let b = sample_episode(&s, 4, 3, 10, &mut rng_from(5)).unwrap();
        let ids = |e: &Episode| e.supports.iter().map(|i| i.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&a), ids(&b));
        assert_eq!(a.query.id, b.query.id);
        assert_eq!(a.slots, b.slots);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn episode_invariants(seed in any::<u64>(), n in 1usize..8, k in 1usize..5, extra in 0usize..3) {
            let n_max = n + extra + 2;
            let s = set(10, 6);
            let e = sample_episode(&s, n, k, n_max, &mut rng_from(seed)).unwrap();
            prop_assert_eq!(e.m(), n * k);
            for &c in &e.classes {
                prop_assert_eq!(e.supports.iter().filter(|x| x.class_id == c).count(), k);
            }
            let mut distinct = e.classes.clone();
            distinct.sort_unstable();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), n);
            let mut slots = e.slots.clone();
            slots.sort_unstable();
            slots.dedup();
            prop_assert_eq!(slots.len(), n);
            prop_assert!(e.slots.iter().all(|&s| s < n_max));
            prop_assert!(e.classes.contains(&e.query_class()));
            prop_assert!(e.supports.iter().all(|x| x.id != e.query.id));
            let mut ids: Vec<&String> = e.supports.iter().map(|x| &x.id).collect();
            ids.sort();
            ids.dedup();
            prop_assert_eq!(ids.len(), n * k);
        }
    }
}
