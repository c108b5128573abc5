//! Procedural compositional segmentation benchmark.
//!
//! Scenes are rendered at 64x64 with instances whose semantics are grounded
//! in independent visual channels: the category picks the shape class, the
//! first attribute group picks a fill pattern carried by luminance, the
//! second picks a hue band carried by chroma. Every semantic unit is visible
//! on its own, so composition is learnable from atoms.
//!
//! The split protocol holds out category-attribute combinations: training
//! scenes draw only seen compositions, the unseen test split draws only
//! held-out ones, and every atom still occurs somewhere in training.

use serde::{Deserialize, Serialize};

use crate::error::SynthError;
use crate::prompt::Vocabulary;
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;

/// A full composition: category index plus one member index per group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Composition {
    pub category: usize,
    pub attributes: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttributeGroup {
    pub name: String,
    pub members: Vec<String>,
}

/// Categories, attribute groups and the seen/unseen partition of their
/// product space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompositionSpace {
    pub categories: Vec<String>,
    pub groups: Vec<AttributeGroup>,
    pub seen: Vec<Composition>,
    pub unseen: Vec<Composition>,
}

impl CompositionSpace {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn total_compositions(&self) -> usize {
        self.categories.len() * self.groups.iter().map(|g| g.members.len()).product::<usize>()
    }

    pub fn is_seen(&self, c: &Composition) -> bool {
        self.seen.contains(c)
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let groups: Vec<(String, Vec<String>)> =
            self.groups.iter().map(|g| (g.name.clone(), g.members.clone())).collect();
        Vocabulary::build(&self.categories, &groups)
    }

    fn enumerate_all(categories: usize, group_sizes: &[usize]) -> Vec<Composition> {
        let mut all = vec![];
        let mut counter = vec![0usize; group_sizes.len()];
        for c in 0..categories {
            counter.iter_mut().for_each(|x| *x = 0);
            loop {
                all.push(Composition { category: c, attributes: counter.clone() });
                let mut d = group_sizes.len();
                loop {
                    if d == 0 {
                        break;
                    }
                    d -= 1;
                    counter[d] += 1;
                    if counter[d] < group_sizes[d] {
                        break;
                    }
                    counter[d] = 0;
                    if d == 0 {
                        d = usize::MAX;
                        break;
                    }
                }
                if d == usize::MAX {
                    break;
                }
            }
        }
        all
    }

    /// Every category and every individual attribute value must occur in at
    /// least one seen composition.
    pub fn covers_all_atoms(seen: &[Composition], categories: usize, group_sizes: &[usize]) -> bool {
        let mut cat_seen = vec![false; categories];
        let mut attr_seen: Vec<Vec<bool>> = group_sizes.iter().map(|&s| vec![false; s]).collect();
        for comp in seen {
            cat_seen[comp.category] = true;
            for (g, &a) in comp.attributes.iter().enumerate() {
                attr_seen[g][a] = true;
            }
        }
        cat_seen.iter().all(|&b| b) && attr_seen.iter().all(|g| g.iter().all(|&b| b))
    }

    pub fn check_invariants(&self) -> Result<(), SynthError> {
        let group_sizes: Vec<usize> = self.groups.iter().map(|g| g.members.len()).collect();
        if self.seen.iter().any(|c| self.unseen.contains(c)) {
            return Err(SynthError::InvalidSpace("seen and unseen overlap".into()));
        }
        if self.seen.len() + self.unseen.len() != self.total_compositions() {
            return Err(SynthError::InvalidSpace("partition does not cover the space".into()));
        }
        if !Self::covers_all_atoms(&self.seen, self.categories.len(), &group_sizes) {
            return Err(SynthError::InvalidSpace("an atom never occurs in the seen set".into()));
        }
        Ok(())
    }
}

/// Random seen/unseen partition with per-atom coverage, by rejection
/// resampling. Deterministic in the seed.
pub fn build_space(
    num_categories: usize,
    group_sizes: &[usize],
    seen_fraction: f64,
    seed: u64,
) -> Result<CompositionSpace, SynthError> {
    if num_categories == 0 || group_sizes.iter().any(|&s| s < 2) {
        return Err(SynthError::InvalidSpace(
            "need at least one category and every group size >= 2".into(),
        ));
    }
    if !(0.0..=1.0).contains(&seen_fraction) || seen_fraction == 0.0 {
        return Err(SynthError::InvalidSpace(format!("seen fraction {seen_fraction} out of range")));
    }
    let all = CompositionSpace::enumerate_all(num_categories, group_sizes);
    let target = ((seen_fraction * all.len() as f64).ceil() as usize).min(all.len());
    let mut rng = rng::stream(seed, "space");
    const MAX_ATTEMPTS: usize = 1000;
    for _ in 0..MAX_ATTEMPTS {
        let mut pool = all.clone();
        pool.shuffle(&mut rng);
        let seen: Vec<Composition> = pool[..target].to_vec();
        if CompositionSpace::covers_all_atoms(&seen, num_categories, group_sizes) {
            let unseen: Vec<Composition> = all.iter().filter(|c| !seen.contains(c)).cloned().collect();
            let space = CompositionSpace {
                categories: (0..num_categories).map(|i| format!("cat{i}")).collect(),
                groups: group_sizes
                    .iter()
                    .enumerate()
                    .map(|(g, &s)| AttributeGroup {
                        name: format!("group{g}"),
                        members: (0..s).map(|m| format!("g{g}_a{m}")).collect(),
                    })
                    .collect(),
                seen,
                unseen,
            };
            space.check_invariants()?;
            return Ok(space);
        }
    }
    Err(SynthError::CoverageUnsatisfiable(MAX_ATTEMPTS))
}

/// The building benchmark preset: one category, two four-way attribute
/// groups, four diagonal pairs retained as seen and the remaining twelve
/// held out.
pub fn ubc_analog() -> CompositionSpace {
    let roofs = ["hipped_roof", "gable_roof", "flat_roof", "other_roof"];
    let uses = ["residential", "commercial", "industrial", "public"];
    let seen: Vec<Composition> =
        (0..4).map(|i| Composition { category: 0, attributes: vec![i, i] }).collect();
    let mut unseen = vec![];
    for r in 0..4 {
        for u in 0..4 {
            if r != u {
                unseen.push(Composition { category: 0, attributes: vec![r, u] });
            }
        }
    }
    let space = CompositionSpace {
        categories: vec!["building".into()],
        groups: vec![
            AttributeGroup { name: "roof".into(), members: roofs.iter().map(|s| s.to_string()).collect() },
            AttributeGroup { name: "use".into(), members: uses.iter().map(|s| s.to_string()).collect() },
        ],
        seen,
        unseen,
    };
    space.check_invariants().expect("preset invariants");
    space
}

// ── scenes ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    TestSeen,
    TestUnseen,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestSeen => "test_seen",
            Split::TestUnseen => "test_unseen",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub composition: Composition,
    pub mask: Vec<bool>,
}

impl Instance {
    pub fn mask_f64(&self) -> Vec<f64> {
        self.mask.iter().map(|&b| f64::from(u8::from(b))).collect()
    }

    pub fn area(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// CHW float image in [0,1].
    pub image: Vec<f32>,
    pub instances: Vec<Instance>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub noise_sigma: f64,
    /// Minimum Chebyshev pixel distance between instances.
    pub min_separation: usize,
    pub min_half_extent: usize,
    pub max_half_extent: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            height: 64,
            width: 64,
            min_instances: 2,
            max_instances: 6,
            noise_sigma: 0.02,
            min_separation: 2,
            min_half_extent: 5,
            max_half_extent: 11,
        }
    }
}

/// Mean-luminance-separated fill patterns; index = first attribute member.
fn pattern_luminance(pattern: usize, dx: i64, dy: i64, y_abs: i64, x_abs: i64, r: i64) -> f64 {
    match pattern {
        0 => 0.85,                                                   // solid
        1 => {
            if (y_abs.rem_euclid(4)) < 2 { 0.85 } else { 0.45 }      // striped
        }
        2 => {
            if y_abs.rem_euclid(3) == 1 && x_abs.rem_euclid(3) == 1 { 0.85 } else { 0.18 } // dotted
        }
        _ => {
            // ring: bright band outside 0.7 r
            let d2 = (dx * dx + dy * dy) as f64;
            let band = 0.7 * r as f64;
            if d2 >= band * band { 0.85 } else { 0.15 }
        }
    }
}

/// Luminance-neutral chroma directions; index = second attribute member.
fn hue_offset(hue: usize) -> [f64; 3] {
    const A: f64 = 0.14;
    let u = [std::f64::consts::FRAC_1_SQRT_2, -std::f64::consts::FRAC_1_SQRT_2, 0.0];
    let v = [0.408_248_290_463_863, 0.408_248_290_463_863, -0.816_496_580_927_726];
    match hue {
        0 => [u[0] * A, u[1] * A, u[2] * A],
        1 => [v[0] * A, v[1] * A, v[2] * A],
        2 => [-u[0] * A, -u[1] * A, -u[2] * A],
        _ => [-v[0] * A, -v[1] * A, -v[2] * A],
    }
}

fn shape_mask(shape: usize, cx: i64, cy: i64, r: i64, h: usize, w: usize) -> Vec<bool> {
    let mut mask = vec![false; h * w];
    for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
        for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
            let (dx, dy) = (x - cx, y - cy);
            let inside = match shape {
                0 => true,                              // square: bbox itself
                1 => dx * dx + dy * dy <= r * r,        // disc
                _ => {
                    // upward triangle: apex at (cx, cy-r), base at cy+r
                    let t = (dy + r) as f64 / (2 * r) as f64;
                    (dx.abs() as f64) <= t * r as f64
                }
            };
            if inside {
                mask[y as usize * w + x as usize] = true;
            }
        }
    }
    mask
}

fn too_close(mask: &[bool], occupied: &[bool], h: usize, w: usize, sep: i64) -> bool {
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !mask[y as usize * w + x as usize] {
                continue;
            }
            for ny in (y - sep).max(0)..=(y + sep).min(h as i64 - 1) {
                for nx in (x - sep).max(0)..=(x + sep).min(w as i64 - 1) {
                    if occupied[ny as usize * w + nx as usize] {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Render one scene. `force_first` pins the first instance's composition to
/// an index into the split's composition pool (the corpus generator cycles
/// it so every unseen composition shows up often enough).
pub fn render_scene(
    space: &CompositionSpace,
    split: Split,
    seed: u64,
    cfg: &RenderConfig,
    force_first: Option<usize>,
) -> Result<SynthScene, SynthError> {
    if space.group_count() > 2 {
        return Err(SynthError::InvalidSpace(
            "rendering grounds at most two attribute groups".into(),
        ));
    }
    if space.categories.len() > 3 || space.groups.iter().any(|g| g.members.len() > 4) {
        return Err(SynthError::InvalidSpace(
            "rendering supports up to 3 categories and 4 members per group".into(),
        ));
    }
    let pool: &[Composition] = match split {
        Split::Train | Split::TestSeen => &space.seen,
        Split::TestUnseen => &space.unseen,
    };
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = rng::stream(seed, "render");
    let n_target = rng.random_range(cfg.min_instances..=cfg.max_instances);

    let mut occupied = vec![false; h * w];
    let mut instances: Vec<Instance> = vec![];
    for i in 0..n_target {
        let comp = if i == 0 {
            match force_first {
                Some(ix) => pool[ix % pool.len()].clone(),
                None => pool[rng.random_range(0..pool.len())].clone(),
            }
        } else {
            pool[rng.random_range(0..pool.len())].clone()
        };
        let mut placed = false;
        for _try in 0..200 {
            let r = rng.random_range(cfg.min_half_extent..=cfg.max_half_extent) as i64;
            let cx = rng.random_range(r as usize + 1..w - r as usize - 1) as i64;
            let cy = rng.random_range(r as usize + 1..h - r as usize - 1) as i64;
            let mask = shape_mask(comp.category % 3, cx, cy, r, h, w);
            if mask.iter().filter(|&&b| b).count() < 16 {
                continue;
            }
            if too_close(&mask, &occupied, h, w, cfg.min_separation as i64) {
                continue;
            }
            for (o, &m) in occupied.iter_mut().zip(&mask) {
                *o |= m;
            }
            instances.push(Instance { composition: comp.clone(), mask });
            placed = true;
            break;
        }
        if !placed {
            break; // keep what fits; density-limited scenes carry fewer instances
        }
    }
    if instances.len() < cfg.min_instances.min(2) {
        return Err(SynthError::PlacementFailed { seed });
    }

    // paint instances, then noise
    let mut image = vec![0.0f64; 3 * h * w];
    for inst in &instances {
        let pattern = inst.composition.attributes.first().copied().unwrap_or(0);
        let hue = inst.composition.attributes.get(1).copied().unwrap_or(0);
        let off = hue_offset(hue);
        // recover instance center/extent from the mask bounding box
        let (mut y0, mut y1, mut x0, mut x1) = (h as i64, -1i64, w as i64, -1i64);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                if inst.mask[y as usize * w + x as usize] {
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
        let (cy, cx) = ((y0 + y1) / 2, (x0 + x1) / 2);
        let r = ((y1 - y0) / 2).max((x1 - x0) / 2).max(1);
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let px = y as usize * w + x as usize;
                if !inst.mask[px] {
                    continue;
                }
                let lum = pattern_luminance(pattern, x - cx, y - cy, y, x, r);
                for ch in 0..3 {
                    image[ch * h * w + px] = (lum + off[ch]).clamp(0.0, 1.0);
                }
            }
        }
    }
    for v in image.iter_mut() {
        *v = (*v + rng::normal(&mut rng) * cfg.noise_sigma).clamp(0.0, 1.0);
    }

    Ok(SynthScene {
        id: String::new(),
        split,
        seed,
        height: h,
        width: w,
        image: image.into_iter().map(|v| v as f32).collect(),
        instances,
    })
}

// ── labels ───────────────────────────────────────────────────────────

/// A prompt in index form: category plus an optional member per group.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptSpec {
    pub category: usize,
    pub attributes: Vec<Option<usize>>,
}

impl PromptSpec {
    pub fn category_only(category: usize, k: usize) -> Self {
        PromptSpec { category, attributes: vec![None; k] }
    }

    pub fn active_count(&self) -> usize {
        self.attributes.iter().filter(|a| a.is_some()).count()
    }

    /// Name form used by the prompt bank: `(category, [(group, member)])`.
    pub fn names<'a>(&self, space: &'a CompositionSpace) -> (&'a str, Vec<(&'a str, &'a str)>) {
        let cat = space.categories[self.category].as_str();
        let attrs = self
            .attributes
            .iter()
            .enumerate()
            .filter_map(|(g, a)| {
                a.map(|ix| (space.groups[g].name.as_str(), space.groups[g].members[ix].as_str()))
            })
            .collect();
        (cat, attrs)
    }

    /// The composition this prompt encodes, if it is fully specified.
    pub fn full_composition(&self) -> Option<Composition> {
        let attrs: Option<Vec<usize>> = self.attributes.iter().copied().collect();
        attrs.map(|attributes| Composition { category: self.category, attributes })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub scene_id: String,
    pub tier: u8,
    pub prompt: PromptSpec,
    pub targets: Vec<usize>,
}

/// Instances satisfying the category and every present attribute (AND).
pub fn targets_for_prompt(scene: &SynthScene, prompt: &PromptSpec) -> Vec<usize> {
    scene
        .instances
        .iter()
        .enumerate()
        .filter(|(_, inst)| {
            inst.composition.category == prompt.category
                && prompt.attributes.iter().enumerate().all(|(g, a)| match a {
                    Some(ix) => inst.composition.attributes[g] == *ix,
                    None => true,
                })
        })
        .map(|(i, _)| i)
        .collect()
}

/// Three-tier label construction for one training scene. Tier probabilities
/// are 1/3 each; tier-3 scenes emit their composed prompt only when the
/// instance's attribute pair is a seen composition.
pub fn make_labels(
    scene: &SynthScene,
    space: &CompositionSpace,
    tier_rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<LabeledSample> {
    let k = space.group_count();
    let tier = tier_rng.random_range(1..=3u8);
    let inst_ix = tier_rng.random_range(0..scene.instances.len());
    let inst = &scene.instances[inst_ix];
    let mut samples = vec![];

    let mut push = |tier: u8, prompt: PromptSpec| {
        let targets = targets_for_prompt(scene, &prompt);
        samples.push(LabeledSample { scene_id: scene.id.clone(), tier, prompt, targets });
    };

    match tier {
        1 => push(1, PromptSpec::category_only(inst.composition.category, k)),
        2 => {
            let g = tier_rng.random_range(0..k);
            let mut attributes = vec![None; k];
            attributes[g] = Some(inst.composition.attributes[g]);
            push(2, PromptSpec { category: inst.composition.category, attributes });
        }
        _ => {
            let g = tier_rng.random_range(0..k);
            let mut attributes = vec![None; k];
            attributes[g] = Some(inst.composition.attributes[g]);
            push(3, PromptSpec { category: inst.composition.category, attributes });
            if space.is_seen(&inst.composition) {
                let attributes = inst.composition.attributes.iter().map(|&a| Some(a)).collect();
                push(3, PromptSpec { category: inst.composition.category, attributes });
            }
        }
    }
    samples
}

// ── corpus ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub space: CompositionSpace,
    pub train_scenes: usize,
    pub test_seen_scenes: usize,
    pub test_unseen_scenes: usize,
    pub seed: u64,
    pub render: RenderConfig,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub scenes: Vec<SynthScene>,
    pub samples: Vec<LabeledSample>,
}

impl Dataset {
    pub fn scenes_of(&self, split: Split) -> impl Iterator<Item = &SynthScene> {
        self.scenes.iter().filter(move |s| s.split == split)
    }

    pub fn scene(&self, id: &str) -> Option<&SynthScene> {
        self.scenes.iter().find(|s| s.id == id)
    }
}

/// Generate the full corpus: train scenes with tiered labels plus the two
/// test splits. Pure function of the spec.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset, SynthError> {
    let mut scenes = vec![];
    let mut samples = vec![];
    let splits = [
        (Split::Train, spec.train_scenes),
        (Split::TestSeen, spec.test_seen_scenes),
        (Split::TestUnseen, spec.test_unseen_scenes),
    ];
    for (split, count) in splits {
        for i in 0..count {
            let scene_seed = rng::derive(spec.seed, &format!("scene/{}/{i}", split.dir_name()));
            // cycle the unseen pool so every held-out composition recurs
            let force = (split == Split::TestUnseen).then_some(i);
            let mut scene = render_scene(&spec.space, split, scene_seed, &spec.render, force)?;
            scene.id = format!("{}_{i:05}", split.dir_name());
            if split == Split::Train {
                let mut tier_rng = rng::stream(scene_seed, "tier");
                samples.extend(make_labels(&scene, &spec.space, &mut tier_rng));
            }
            scenes.push(scene);
        }
    }
    Ok(Dataset { spec: spec.clone(), scenes, samples })
}

#[cfg(test)]
mod tests;
