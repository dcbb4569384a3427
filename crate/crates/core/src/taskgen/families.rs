//! Template definitions for the six families.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde_json::{json, Value};

use super::builder::{
    clearance, color, Region, SceneBuilder, BIN_RGB, NOVEL_COLORS, PAD_RGB, SWITCH_OFF_RGB,
    SWITCH_ON_RGB,
};
use super::{
    max_steps, tolerance, Condition, Conditional, CriterionKind, SuccessCriterion, TaskError,
    TaskSpec, TemplateRef, Variant, DEFAULT_WINDOW_STEPS, HOLD_STEPS,
};
use crate::episode::{Family, Tier};
use crate::rng::{bounded, choose, seeded, uniform, Rng};
use crate::sim::{
    inject_event, Event, EventKind, Goal, MotionScript, MotionSegment, ObjectId, Relation,
    SceneState, Shape, DEFAULT_DT,
};

const CUBE: f64 = 0.04;
const PAD: f64 = 0.06;
/// Top surface height of a pad resting on the table.
const PAD_TOP: f64 = PAD / 4.0;
const BIN: f64 = 0.12;
const PEG: f64 = 0.06;
const LIFT_HEIGHT: f64 = 0.05;
/// Center offset used when building relation targets.
const RELATION_OFFSET: f64 = 0.09;

const RED: [u8; 3] = [220, 40, 40];
const GREEN: [u8; 3] = [40, 180, 60];
const BLUE: [u8; 3] = [40, 80, 220];
const YELLOW: [u8; 3] = [230, 210, 40];
const TABLE_RGB: [u8; 3] = [186, 176, 160];

/// Region for moving objects; bins and pads stay out of it.
const LANE: Region = Region::new((0.02, 0.22), (-0.2, 0.2));
const STATIC: Region = Region::new((-0.24, -0.06), (-0.24, 0.24));
const CENTER: Region = Region::new((-0.08, 0.08), (-0.08, 0.08));

#[rustfmt::skip]
const NAMES: [[[&str; 3]; 3]; 6] = [
    [["place_at_spot", "lift", "place_in_bin"],
     ["two_spots", "two_in_bin", "bin_and_spot"],
     ["tower", "three_pegs", "three_spots"]],
    [["color", "shape", "size"],
     ["subtle_color", "subtle_shape", "subtle_size"],
     ["occluded_color", "occluded_shape", "occluded_size"]],
    [["attribute_pick", "attribute_touch", "attribute_place"],
     ["negation", "size_and_color", "nearest_to_bin"],
     ["conditional", "avoid_filter", "two_stage"]],
    [["window_touch", "window_place", "deadline_lift"],
     ["moving_lift", "moving_touch", "moving_place"],
     ["redirect_lift", "redirect_touch", "redirect_place"]],
    [["left_of", "in_front_of", "between"],
     ["stack", "hold_above", "tower"],
     ["yaw_place", "stack_yaw", "aligned_right_of"]],
    [["distractors_place", "distractors_lift", "distractors_bin"],
     ["recolor_place", "recolor_lift", "recolor_bin"],
     ["layout_two_spots", "layout_two_in_bin", "layout_bin_and_spot"]],
];

pub(super) fn template_name(family: Family, tier: Tier, id: u8) -> Option<&'static str> {
    let i = id.checked_sub(1)? as usize;
    NAMES[family.code() as usize][tier.code() as usize].get(i).copied()
}

/// Attribute of an object excluded from `fixed_params` because it is probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum Hide {
    Color,
    Shape,
    Size,
    Position,
    All,
}

/// Everything a template produces before it is frozen into a spec.
pub(super) struct Draft {
    pub b: SceneBuilder,
    pub instruction: String,
    pub entangled_instruction: Option<String>,
    pub goals: Vec<Goal>,
    pub kind: CriterionKind,
    pub atomic: u32,
    pub probe: (String, Value),
    pub hidden: Vec<(ObjectId, Hide)>,
    pub fixed_goals: bool,
    pub extra: BTreeMap<String, Value>,
    pub events: Vec<Event>,
    pub conditional: Option<Conditional>,
}

impl Draft {
    fn new(b: SceneBuilder, probe: (&str, Value)) -> Self {
        Draft {
            b,
            instruction: String::new(),
            entangled_instruction: None,
            goals: Vec::new(),
            kind: CriterionKind::AtGoalPose,
            atomic: 1,
            probe: (probe.0.to_string(), probe.1),
            hidden: Vec::new(),
            fixed_goals: true,
            extra: BTreeMap::new(),
            events: Vec::new(),
            conditional: None,
        }
    }

    fn task(mut self, instruction: impl Into<String>, goals: Vec<Goal>, kind: CriterionKind, atomic: u32) -> Self {
        self.instruction = instruction.into();
        self.goals = goals;
        self.kind = kind;
        self.atomic = atomic;
        self
    }

    fn hidden_attrs(&self, id: ObjectId) -> Vec<Hide> {
        self.hidden.iter().filter(|(o, _)| *o == id).map(|(_, h)| *h).collect()
    }

    fn fixed_params(&self) -> BTreeMap<String, Value> {
        let mut objects = Vec::new();
        for o in &self.b.scene.objects {
            let hide = self.hidden_attrs(o.id);
            if hide.contains(&Hide::All) {
                continue;
            }
            let mut m = serde_json::Map::new();
            m.insert("id".into(), json!(o.id));
            if !hide.contains(&Hide::Shape) {
                m.insert("shape".into(), json!(o.shape));
            }
            if !hide.contains(&Hide::Color) {
                m.insert("color".into(), json!(o.color));
            }
            if !hide.contains(&Hide::Size) {
                m.insert("size".into(), json!(o.size));
            }
            if !hide.contains(&Hide::Position) {
                m.insert("xy".into(), json!([o.pose.position[0], o.pose.position[1]]));
                m.insert("yaw".into(), json!(o.pose.yaw()));
            }
            objects.push(Value::Object(m));
        }
        let mut out = self.extra.clone();
        out.insert("objects".into(), Value::Array(objects));
        if self.fixed_goals {
            out.insert("goals".into(), json!(self.goals));
        }
        out
    }

    pub(super) fn finish(self, t: TemplateRef, seed: u64, entangled: bool) -> (TaskSpec, SceneState) {
        let fixed_params = self.fixed_params();
        let instruction = match (&self.entangled_instruction, entangled) {
            (Some(e), true) => e.clone(),
            _ => self.instruction.clone(),
        };
        let (kind, atomic) = if entangled {
            (CriterionKind::InsideContainer, self.atomic + 1)
        } else {
            (self.kind, self.atomic)
        };
        let name = template_name(t.family, t.tier, t.template_id).unwrap_or("unknown");
        let predicate_id = format!(
            "{}.{}.{}.{}",
            t.family.as_str().to_lowercase(),
            t.tier.as_str().to_lowercase(),
            name,
            serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
        );
        let mut scene = self.b.finish(instruction.clone());
        scene.goals = self.goals;
        scene.sequential = kind == CriterionKind::SequenceCompleted;
        for e in self.events {
            scene = inject_event(&scene, e).expect("template events are valid");
        }
        let spec = TaskSpec {
            family: t.family,
            tier: t.tier,
            template_id: t.template_id,
            seed,
            scene_id: scene.scene_id.clone(),
            robot_id: scene.embodiment.robot_id.clone(),
            probe_params: BTreeMap::from([self.probe]),
            fixed_params,
            instruction,
            predicate_id: predicate_id.clone(),
            criterion: SuccessCriterion {
                predicate_id,
                kind,
                tolerance: tolerance(t.tier),
                hold_steps: HOLD_STEPS,
            },
            entangled,
            atomic_actions: atomic,
            max_steps: max_steps(t.tier),
            conditional: self.conditional,
        };
        (spec, scene)
    }
}

fn fixed_rng(t: TemplateRef, seed: u64) -> Rng {
    seeded(seed, &format!("{}/{}/{}/fixed", t.family, t.tier, t.template_id))
}

fn probe_rng(t: TemplateRef, seed: u64) -> Rng {
    seeded(seed, &format!("{}/{}/{}/probe", t.family, t.tier, t.template_id))
}

fn scene_label(t: TemplateRef, seed: u64) -> String {
    format!("{}-{}-{}-{}", t.family, t.tier, t.template_id, seed)
}

/// Checks an override against the template's fixed probe value.
fn fixed_probe(variant: &Variant, value: Value) -> Result<Value, TaskError> {
    match &variant.probe {
        Some(p) if *p != value => Err(TaskError::InvalidProbe(format!(
            "this template only admits {value}, got {p}"
        ))),
        _ => Ok(value),
    }
}

/// Resting position of `object` centered on `spot` at height `surface`.
fn on(b: &SceneBuilder, spot: ObjectId, surface: f64, object: ObjectId) -> [f64; 3] {
    let o = b.scene.object(spot).expect("object exists");
    [o.pose.position[0], o.pose.position[1], surface + b.rest_z(object)]
}

fn at_pad(b: &SceneBuilder, object: ObjectId, pad: ObjectId) -> Goal {
    Goal::AtPosition {
        object,
        position: on(b, pad, PAD_TOP, object),
        yaw: None,
    }
}

fn tint(c: [u8; 3]) -> [u8; 3] {
    [c[0] / 2, c[1] / 2, c[2] / 2]
}

fn blend(c: [u8; 3], toward: [u8; 3], w: f64) -> [u8; 3] {
    let mix = |a: u8, b: u8| (a as f64 * (1.0 - w) + b as f64 * w).round() as u8;
    [mix(c[0], toward[0]), mix(c[1], toward[1]), mix(c[2], toward[2])]
}

pub(super) fn draft(t: TemplateRef, seed: u64, variant: &Variant) -> Result<Draft, TaskError> {
    match t.family {
        Family::Control => {
            let mut rng = fixed_rng(t, seed);
            let b = SceneBuilder::new(scene_label(t, seed));
            let probe = fixed_probe(variant, json!(template_name(t.family, t.tier, t.template_id)))?;
            Ok(control(t.tier, t.template_id, &mut rng, b, Region::TABLE, ("skill", probe)).0)
        }
        Family::Perception => perception(t, seed, variant),
        Family::Language => language(t, seed, variant),
        Family::DynamicAdaptation => dynamic(t, seed, variant),
        Family::SpatialReasoning => spatial(t, seed, variant),
        Family::Robustness => robustness(t, seed, variant),
    }
}

/// Control templates. Also returns the ids of the manipulated objects with
/// the color word naming them in the instruction.
fn control(
    tier: Tier,
    id: u8,
    rng: &mut Rng,
    mut b: SceneBuilder,
    region: Region,
    probe: (&str, Value),
) -> (Draft, Vec<(ObjectId, &'static str)>) {
    use CriterionKind::*;
    let pad_at = |b: &mut SceneBuilder, rng: &mut Rng, rgb| {
        let p = b.spot(rng, region, PAD);
        b.add(Shape::Switch, rgb, PAD, p)
    };
    match (tier, id) {
        (Tier::Easy, 1) => {
            let cube = b.place(rng, region, Shape::Cube, RED, CUBE);
            let pad = pad_at(&mut b, rng, PAD_RGB);
            let goal = at_pad(&b, cube, pad);
            let d = Draft::new(b, probe).task("Place the red cube on the grey pad.", vec![goal], AtGoalPose, 2);
            (d, vec![(cube, "red")])
        }
        (Tier::Easy, 2) => {
            let cube = b.place(rng, region, Shape::Cube, RED, CUBE);
            let goal = Goal::Lifted { object: cube, height: LIFT_HEIGHT };
            let d = Draft::new(b, probe).task("Pick up the red cube.", vec![goal], AtGoalPose, 1);
            (d, vec![(cube, "red")])
        }
        (Tier::Easy, _) => {
            let cube = b.place(rng, region, Shape::Cube, RED, CUBE);
            let bin = b.place(rng, region, Shape::Container, BIN_RGB, BIN);
            let goal = Goal::Inside { object: cube, container: bin };
            let d = Draft::new(b, probe).task("Put the red cube in the bin.", vec![goal], InsideContainer, 2);
            (d, vec![(cube, "red")])
        }
        (Tier::Medium, 1) => {
            let red = b.place(rng, region, Shape::Cube, RED, CUBE);
            let blue = b.place(rng, region, Shape::Cube, BLUE, CUBE);
            let pr = pad_at(&mut b, rng, tint(RED));
            let pb = pad_at(&mut b, rng, tint(BLUE));
            let goals = vec![at_pad(&b, red, pr), at_pad(&b, blue, pb)];
            let d = Draft::new(b, probe).task(
                "Place the red cube and the blue cube on the pads of matching color.",
                goals,
                AtGoalPose,
                4,
            );
            (d, vec![(red, "red"), (blue, "blue")])
        }
        (Tier::Medium, 2) => {
            let cube = b.place(rng, region, Shape::Cube, RED, CUBE);
            let ball = b.place(rng, region, Shape::Sphere, YELLOW, CUBE);
            let bin = b.place(rng, region, Shape::Container, BIN_RGB, BIN);
            let goals = vec![
                Goal::Inside { object: cube, container: bin },
                Goal::Inside { object: ball, container: bin },
            ];
            let d = Draft::new(b, probe).task(
                "Put the red cube and the yellow sphere in the bin.",
                goals,
                InsideContainer,
                4,
            );
            (d, vec![(cube, "red"), (ball, "yellow")])
        }
        (Tier::Medium, _) => {
            let red = b.place(rng, region, Shape::Cube, RED, CUBE);
            let blue = b.place(rng, region, Shape::Cube, BLUE, CUBE);
            let bin = b.place(rng, region, Shape::Container, BIN_RGB, BIN);
            let pad = pad_at(&mut b, rng, PAD_RGB);
            let goals = vec![Goal::Inside { object: red, container: bin }, at_pad(&b, blue, pad)];
            let d = Draft::new(b, probe).task(
                "Put the red cube in the bin and place the blue cube on the grey pad.",
                goals,
                AtGoalPose,
                4,
            );
            (d, vec![(red, "red"), (blue, "blue")])
        }
        (Tier::Hard, 1) => {
            let red = b.place(rng, region, Shape::Cube, RED, CUBE);
            let blue = b.place(rng, region, Shape::Cube, BLUE, CUBE);
            let green = b.place(rng, region, Shape::Cube, GREEN, CUBE);
            let pad = pad_at(&mut b, rng, PAD_RGB);
            let goals = vec![
                at_pad(&b, red, pad),
                Goal::StackedOn { object: blue, base: red },
                Goal::StackedOn { object: green, base: blue },
            ];
            let d = Draft::new(b, probe).task(
                "Build a tower on the grey pad: red cube at the bottom, then blue, then green.",
                goals,
                StackedOn,
                6,
            );
            (d, vec![(red, "red"), (blue, "blue"), (green, "green")])
        }
        (Tier::Hard, 2) => {
            let mut goals = Vec::new();
            let mut movers = Vec::new();
            let mut angles = Vec::new();
            let mut pegs = Vec::new();
            for (rgb, name) in [(RED, "red"), (BLUE, "blue"), (GREEN, "green")] {
                let peg = b.place(rng, region, Shape::Peg, rgb, PEG);
                pegs.push((peg, rgb));
                movers.push((peg, name));
            }
            for (peg, rgb) in pegs {
                let pad = pad_at(&mut b, rng, tint(rgb));
                let yaw = uniform(rng, -1.2, 1.2);
                angles.push(yaw.to_degrees().round() as i64);
                goals.push(Goal::AtPosition {
                    object: peg,
                    position: on(&b, pad, PAD_TOP, peg),
                    yaw: Some(yaw),
                });
            }
            let instruction = format!(
                "Stand each peg on the pad of its color, turned {} (red), {} (blue) and {} (green) degrees.",
                angles[0], angles[1], angles[2]
            );
            let d = Draft::new(b, probe).task(instruction, goals, AtGoalPose, 6);
            (d, movers)
        }
        (Tier::Hard, _) => {
            let mut goals = Vec::new();
            let mut movers = Vec::new();
            let mut cubes = Vec::new();
            for (rgb, name) in [(RED, "red"), (BLUE, "blue"), (GREEN, "green")] {
                cubes.push((b.place(rng, region, Shape::Cube, rgb, CUBE), rgb));
                movers.push((cubes.last().unwrap().0, name));
            }
            for (cube, rgb) in cubes {
                let pad = pad_at(&mut b, rng, tint(rgb));
                goals.push(at_pad(&b, cube, pad));
            }
            let d = Draft::new(b, probe).task(
                "Place the red, blue and green cubes on the pads of matching color.",
                goals,
                AtGoalPose,
                6,
            );
            (d, movers)
        }
    }
}

const PERCEPTION_COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
const PERCEPTION_SHAPES: [Shape; 3] = [Shape::Cube, Shape::Sphere, Shape::Cylinder];
const PERCEPTION_SIZES: [(&str, f64); 3] = [("small", 0.03), ("medium", 0.045), ("large", 0.06)];

#[derive(Clone, Copy)]
struct Looks {
    shape: Shape,
    color: &'static str,
    size: usize,
}

fn perception(t: TemplateRef, seed: u64, variant: &Variant) -> Result<Draft, TaskError> {
    let mut rng = fixed_rng(t, seed);
    let mut b = SceneBuilder::new(scene_label(t, seed));
    let factor = ["color", "shape", "size"][t.template_id as usize - 1];
    let n_distractors = match t.tier {
        Tier::Easy => 2,
        Tier::Medium => 3,
        Tier::Hard => 4,
    };
    let subtle = t.tier != Tier::Easy;

    let target_spot = b.spot(&mut rng, Region::new((-0.15, 0.15), (-0.15, 0.15)), clearance(Shape::Cube, 0.06));
    let target = Looks {
        shape: *choose(&mut rng, &PERCEPTION_SHAPES),
        color: *choose(&mut rng, &PERCEPTION_COLORS),
        size: bounded(&mut rng, 3) as usize,
    };
    let mut colors: Vec<&str> = PERCEPTION_COLORS.to_vec();
    crate::query::fisher_yates(&mut colors, &mut rng);
    let shared_shape = *choose(&mut rng, &PERCEPTION_SHAPES);
    let shared_size = bounded(&mut rng, 3) as usize;
    let mut distractors = Vec::new();
    for i in 0..n_distractors {
        let random = Looks {
            shape: *choose(&mut rng, &PERCEPTION_SHAPES),
            color: *choose(&mut rng, &PERCEPTION_COLORS),
            size: bounded(&mut rng, 3) as usize,
        };
        let base = if subtle { target } else { random };
        distractors.push(match factor {
            "color" => Looks { color: colors[i], ..base },
            "shape" => Looks { shape: shared_shape, ..base },
            _ => Looks { size: shared_size, ..base },
        });
    }

    let allowed: Vec<Value> = match factor {
        "color" => PERCEPTION_COLORS
            .iter()
            .filter(|c| !distractors.iter().any(|d| d.color == **c))
            .map(|c| json!(c))
            .collect(),
        "shape" => PERCEPTION_SHAPES
            .iter()
            .filter(|s| **s != shared_shape)
            .map(|s| json!(s))
            .collect(),
        _ => PERCEPTION_SIZES
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != shared_size)
            .map(|(_, (n, _))| json!(n))
            .collect(),
    };
    let value = match &variant.probe {
        Some(v) if allowed.contains(v) => v.clone(),
        Some(v) => {
            return Err(TaskError::InvalidProbe(format!(
                "{factor} {v} not among {}",
                Value::Array(allowed)
            )))
        }
        None => choose(&mut probe_rng(t, seed), &allowed).clone(),
    };
    let mut probed = target;
    match factor {
        "color" => probed.color = PERCEPTION_COLORS.iter().find(|c| json!(c) == value).unwrap(),
        "shape" => probed.shape = serde_json::from_value(value.clone()).expect("allowed shape"),
        _ => probed.size = PERCEPTION_SIZES.iter().position(|(n, _)| json!(n) == value).unwrap(),
    }

    let rgb = |l: &Looks, dim: bool| {
        let c = color(l.color).expect("palette color");
        if dim {
            blend(c, TABLE_RGB, 0.3)
        } else {
            c
        }
    };
    let hard = t.tier == Tier::Hard;
    let tid = b.add(probed.shape, rgb(&probed, false), PERCEPTION_SIZES[probed.size].1, target_spot);
    for d in &distractors {
        let size = PERCEPTION_SIZES[d.size].1;
        b.place(&mut rng, Region::TABLE, d.shape, rgb(d, hard), size);
    }
    let bin = b.place(&mut rng, Region::TABLE, Shape::Container, BIN_RGB, BIN);
    if hard {
        b.place(&mut rng, Region::TABLE, Shape::Cylinder, [128, 128, 128], 0.1);
    }

    let desc = match factor {
        "color" => format!("{} object", probed.color),
        "shape" => probed.shape.as_str().to_string(),
        _ => format!("{} object", PERCEPTION_SIZES[probed.size].0),
    };
    let hide = match factor {
        "color" => Hide::Color,
        "shape" => Hide::Shape,
        _ => Hide::Size,
    };
    let mut d = Draft::new(b, (factor, value)).task(
        format!("Touch the {desc}."),
        vec![Goal::Inside { object: tid, container: bin }],
        CriterionKind::ContactedTarget,
        1,
    );
    d.entangled_instruction = Some(format!("Put the {desc} in the bin."));
    d.hidden.push((tid, hide));
    Ok(d)
}

/// Object ids of the shared Language scene.
mod lang {
    pub const BIN: u16 = 1;
    pub const RED: u16 = 2;
    pub const SMALL_GREEN: u16 = 3;
    pub const LARGE_GREEN: u16 = 4;
    pub const BLUE: u16 = 5;
    pub const BALL: u16 = 6;
}

/// The frozen Language scene for a seed; every template shares it.
pub(super) fn language_scene(seed: u64) -> SceneBuilder {
    let mut rng = seeded(seed, "Language/fixed");
    let mut b = SceneBuilder::new(format!("Language-{seed}"));
    let red_size = *choose(&mut rng, &[0.035, 0.05]);
    b.place(&mut rng, Region::TABLE, Shape::Container, BIN_RGB, BIN);
    b.place(&mut rng, Region::TABLE, Shape::Cube, RED, red_size);
    b.place(&mut rng, Region::TABLE, Shape::Cube, GREEN, 0.03);
    b.place(&mut rng, Region::TABLE, Shape::Cube, GREEN, 0.05);
    b.place(&mut rng, Region::TABLE, Shape::Cube, BLUE, 0.04);
    b.place(&mut rng, Region::TABLE, Shape::Sphere, YELLOW, 0.04);
    b
}

fn language(t: TemplateRef, seed: u64, variant: &Variant) -> Result<Draft, TaskError> {
    use lang::*;
    use CriterionKind::*;
    let name = template_name(t.family, t.tier, t.template_id).unwrap();
    let probe = fixed_probe(variant, json!(name))?;
    let b = language_scene(seed);
    let inside = |o| Goal::Inside { object: o, container: BIN };
    let lifted = |o| Goal::Lifted { object: o, height: LIFT_HEIGHT };
    let mut d = Draft::new(b, ("instruction", probe));
    d.fixed_goals = false;
    Ok(match (t.tier, t.template_id) {
        (Tier::Easy, 1) => d.task("Pick up the red cube.", vec![lifted(RED)], AtGoalPose, 1),
        (Tier::Easy, 2) => d.task("Touch the yellow sphere.", vec![Goal::Touch { object: BALL }], ContactedTarget, 1),
        (Tier::Easy, _) => d.task("Put the blue cube in the bin.", vec![inside(BLUE)], InsideContainer, 2),
        (Tier::Medium, 1) => d.task(
            "Pick up the cube that is neither red nor green.",
            vec![lifted(BLUE)],
            AtGoalPose,
            1,
        ),
        (Tier::Medium, 2) => d.task("Put the small green cube in the bin.", vec![inside(SMALL_GREEN)], InsideContainer, 2),
        (Tier::Medium, _) => {
            let s = &d.b.scene;
            let bin = s.object(BIN).unwrap().pose.position;
            let nearest = [RED, SMALL_GREEN, LARGE_GREEN, BLUE]
                .into_iter()
                .min_by(|a, b| {
                    let da = dist_xy(&s.object(*a).unwrap().pose.position, &bin);
                    let db = dist_xy(&s.object(*b).unwrap().pose.position, &bin);
                    da.total_cmp(&db).then(a.cmp(b))
                })
                .unwrap();
            d.task("Touch the cube closest to the bin.", vec![Goal::Touch { object: nearest }], ContactedTarget, 1)
        }
        (Tier::Hard, 1) => {
            let cond = Conditional {
                condition: Condition::LargerThan { a: RED, b: BLUE },
                then_goals: vec![inside(RED)],
                else_goals: vec![inside(BLUE)],
            };
            let goals = cond.select(&d.b.scene).to_vec();
            d.conditional = Some(cond);
            d.task(
                "If the red cube is larger than the blue cube, put the red cube in the bin; otherwise put the blue cube in the bin.",
                goals,
                InsideContainer,
                2,
            )
        }
        (Tier::Hard, 2) => d.task(
            "Put the large green cube in the bin without touching the red cube.",
            vec![inside(LARGE_GREEN), Goal::Avoid { object: RED }],
            InsideContainer,
            2,
        ),
        (Tier::Hard, _) => d.task(
            "Touch the yellow sphere, then put the red cube in the bin.",
            vec![Goal::Touch { object: BALL }, inside(RED)],
            SequenceCompleted,
            3,
        ),
    })
}

fn dist_xy(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn probe_u64(variant: &Variant, lo: u64, hi: u64, default: u64) -> Result<u64, TaskError> {
    match &variant.probe {
        None => Ok(default),
        Some(v) => v
            .as_u64()
            .filter(|n| (lo..=hi).contains(n))
            .ok_or_else(|| TaskError::InvalidProbe(format!("expected an integer in [{lo}, {hi}], got {v}"))),
    }
}

/// Motion that reflects off the lane walls, with an optional redirection.
fn bounce_script(
    object: ObjectId,
    start: [f64; 3],
    velocity: [f64; 3],
    horizon: u64,
    redirect: Option<(u64, [f64; 3])>,
) -> MotionScript {
    let mut v = velocity;
    let mut segments = vec![MotionSegment { start_step: 0, velocity: v }];
    let (mut origin, mut origin_step) = (start, 0u64);
    for s in 1..=horizon {
        let elapsed = (s - origin_step) as f64 * DEFAULT_DT;
        let p = [
            origin[0] + v[0] * elapsed,
            origin[1] + v[1] * elapsed,
            origin[2] + v[2] * elapsed,
        ];
        let mut changed = false;
        if let Some((at, nv)) = redirect {
            if s == at {
                v = nv;
                changed = true;
            }
        }
        let bounds = [LANE.x, LANE.y];
        for k in 0..2 {
            let next = p[k] + v[k] * DEFAULT_DT;
            if (next < bounds[k].0 && v[k] < 0.0) || (next > bounds[k].1 && v[k] > 0.0) {
                v[k] = -v[k];
                changed = true;
            }
        }
        if changed {
            segments.push(MotionSegment { start_step: s, velocity: v });
            origin = p;
            origin_step = s;
        }
    }
    MotionScript::new(object, segments)
}

fn heading(theta: f64, speed: f64) -> [f64; 3] {
    [speed * theta.cos(), speed * theta.sin(), 0.0]
}

fn dynamic(t: TemplateRef, seed: u64, variant: &Variant) -> Result<Draft, TaskError> {
    use CriterionKind::*;
    let mut rng = fixed_rng(t, seed);
    let mut b = SceneBuilder::new(scene_label(t, seed));
    match t.tier {
        Tier::Easy => {
            let window = probe_u64(variant, 30, 400, DEFAULT_WINDOW_STEPS)?;
            let light_step = 20 + bounded(&mut rng, 41);
            let mut extra = BTreeMap::new();
            let switch_on = |object, fire_step, color| Event {
                fire_step,
                kind: EventKind::AttributeSwitch { object, color },
            };
            let mut d = match t.template_id {
                1 => {
                    let sw = b.place(&mut rng, Region::TABLE, Shape::Switch, SWITCH_OFF_RGB, PAD);
                    let goal = Goal::Within {
                        goal: Box::new(Goal::Touch { object: sw }),
                        from_step: light_step,
                        until_step: light_step + window,
                    };
                    let mut d = Draft::new(b, ("window_steps", json!(window)))
                        .task("Touch the switch once it lights up.", vec![goal], ContactedTarget, 1);
                    d.events.push(switch_on(sw, light_step, SWITCH_ON_RGB));
                    extra.insert("light_step".to_string(), json!(light_step));
                    d
                }
                2 => {
                    let sw = b.place(&mut rng, STATIC, Shape::Switch, SWITCH_OFF_RGB, PAD);
                    let cube = b.place(&mut rng, Region::TABLE, Shape::Cube, RED, CUBE);
                    let p = b.spot(&mut rng, Region::TABLE, PAD);
                    let pad = b.add(Shape::Switch, PAD_RGB, PAD, p);
                    let goal = Goal::Within {
                        goal: Box::new(at_pad(&b, cube, pad)),
                        from_step: light_step,
                        until_step: light_step + window,
                    };
                    let mut d = Draft::new(b, ("window_steps", json!(window))).task(
                        "When the light comes on, have the red cube resting on the grey pad.",
                        vec![goal],
                        AtGoalPose,
                        2,
                    );
                    d.events.push(switch_on(sw, light_step, SWITCH_ON_RGB));
                    extra.insert("light_step".to_string(), json!(light_step));
                    d
                }
                _ => {
                    let sw = b.place(&mut rng, STATIC, Shape::Switch, SWITCH_ON_RGB, PAD);
                    let cube = b.place(&mut rng, Region::TABLE, Shape::Cube, RED, CUBE);
                    let goal = Goal::Within {
                        goal: Box::new(Goal::Lifted { object: cube, height: LIFT_HEIGHT }),
                        from_step: 0,
                        until_step: window,
                    };
                    let mut d = Draft::new(b, ("window_steps", json!(window)))
                        .task("Pick up the red cube before the light goes out.", vec![goal], AtGoalPose, 1);
                    d.events.push(switch_on(sw, window, SWITCH_OFF_RGB));
                    d
                }
            };
            d.fixed_goals = false;
            d.extra = extra;
            Ok(d)
        }
        Tier::Medium | Tier::Hard => {
            let theta = uniform(&mut rng, 0.0, TAU);
            let (speed, redirect, probe) = if t.tier == Tier::Medium {
                let default = *choose(&mut probe_rng(t, seed), &[0.02, 0.03, 0.04]);
                let speed = match &variant.probe {
                    None => default,
                    Some(v) => v
                        .as_f64()
                        .filter(|s| *s > 0.0 && *s <= 0.06)
                        .ok_or_else(|| TaskError::InvalidProbe(format!("speed must be in (0, 0.06], got {v}")))?,
                };
                (speed, None, ("speed", json!(speed)))
            } else {
                let default = 40 + bounded(&mut probe_rng(t, seed), 81);
                let at = probe_u64(variant, 1, 700, default)?;
                (0.045, Some(at), ("redirect_step", json!(at)))
            };
            let theta2 = uniform(&mut rng, 0.0, TAU);
            let (shape, noun) = if t.template_id == 2 {
                (Shape::Sphere, "rolling ball")
            } else {
                (Shape::Cube, "moving cube")
            };
            let mover = b.place(&mut rng, LANE, shape, if shape == Shape::Sphere { YELLOW } else { RED }, CUBE);
            let bin = (t.template_id == 3).then(|| b.place(&mut rng, STATIC, Shape::Container, BIN_RGB, BIN));
            let start = b.scene.object(mover).unwrap().pose.position;
            let horizon = max_steps(t.tier) as u64 + 1;
            let script = bounce_script(
                mover,
                start,
                heading(theta, speed),
                horizon,
                redirect.map(|at| (at, heading(theta2, speed))),
            );
            b.scene.motion_scripts.push(script);
            let (instruction, goal, kind, atomic) = match t.template_id {
                1 => (format!("Pick up the {noun}."), Goal::Lifted { object: mover, height: LIFT_HEIGHT }, AtGoalPose, 1),
                2 => (format!("Touch the {noun}."), Goal::Touch { object: mover }, ContactedTarget, 1),
                _ => (
                    format!("Put the {noun} in the bin."),
                    Goal::Inside { object: mover, container: bin.unwrap() },
                    InsideContainer,
                    2,
                ),
            };
            let mut d = Draft::new(b, probe).task(instruction, vec![goal], kind, atomic);
            d.extra.insert("heading".into(), json!(theta));
            if t.tier == Tier::Hard {
                d.extra.insert("speed".into(), json!(speed));
                d.extra.insert("heading_after_redirect".into(), json!(theta2));
            }
            Ok(d)
        }
    }
}

fn spatial(t: TemplateRef, seed: u64, variant: &Variant) -> Result<Draft, TaskError> {
    use CriterionKind::*;
    let mut rng = fixed_rng(t, seed);
    let mut b = SceneBuilder::new(scene_label(t, seed));
    let name = template_name(t.family, t.tier, t.template_id).unwrap();
    let probe = ("relation", fixed_probe(variant, json!(name))?);
    let rel = |object, relation| Goal::Relation { object, relation };
    // A subject somewhere that does not already satisfy the relation.
    let far_from = |b: &mut SceneBuilder, rng: &mut Rng, anchor: [f64; 2], shape, rgb, size| {
        let p = b.spot_where(rng, Region::TABLE, clearance(shape, size), |p| {
            ((p[0] - anchor[0]).powi(2) + (p[1] - anchor[1]).powi(2)).sqrt() > 0.25
        });
        b.add(shape, rgb, size, p)
    };
    Ok(match (t.tier, t.template_id) {
        (Tier::Easy, 1 | 2) => {
            let r = b.spot(&mut rng, CENTER, clearance(Shape::Cube, CUBE));
            let blue = b.add(Shape::Cube, BLUE, CUBE, r);
            let (offset, relation, words) = if t.template_id == 1 {
                ([0.0, RELATION_OFFSET], Relation::LeftOf { reference: blue }, "to the left of")
            } else {
                ([-RELATION_OFFSET, 0.0], Relation::InFrontOf { reference: blue }, "in front of")
            };
            b.reserve([r[0] + offset[0], r[1] + offset[1]], 0.05);
            let red = far_from(&mut b, &mut rng, r, Shape::Cube, RED, CUBE);
            Draft::new(b, probe).task(
                format!("Place the red cube {words} the blue cube."),
                vec![rel(red, relation)],
                RelationSatisfied,
                2,
            )
        }
        (Tier::Easy, _) => {
            let c = b.spot(&mut rng, CENTER, 0.05);
            let phi = uniform(&mut rng, 0.0, TAU);
            let (dx, dy) = (0.1 * phi.cos(), 0.1 * phi.sin());
            let blue = b.add(Shape::Cube, BLUE, CUBE, [c[0] + dx, c[1] + dy]);
            let green = b.add(Shape::Cube, GREEN, CUBE, [c[0] - dx, c[1] - dy]);
            b.reserve([c[0] + dx, c[1] + dy], clearance(Shape::Cube, CUBE));
            b.reserve([c[0] - dx, c[1] - dy], clearance(Shape::Cube, CUBE));
            let red = far_from(&mut b, &mut rng, c, Shape::Cube, RED, CUBE);
            Draft::new(b, probe).task(
                "Place the red cube between the blue cube and the green cube.",
                vec![rel(red, Relation::Between { a: blue, b: green })],
                RelationSatisfied,
                2,
            )
        }
        (Tier::Medium, 1) => {
            let red = b.place(&mut rng, Region::TABLE, Shape::Cube, RED, CUBE);
            let blue = b.place(&mut rng, Region::TABLE, Shape::Cube, BLUE, CUBE);
            Draft::new(b, probe).task(
                "Stack the red cube on the blue cube.",
                vec![Goal::StackedOn { object: red, base: blue }],
                StackedOn,
                2,
            )
        }
        (Tier::Medium, 2) => {
            let red = b.place(&mut rng, Region::TABLE, Shape::Cube, RED, CUBE);
            let ball = b.place(&mut rng, Region::TABLE, Shape::Sphere, YELLOW, CUBE);
            Draft::new(b, probe).task(
                "Hold the red cube above the yellow sphere.",
                vec![rel(red, Relation::Above { reference: ball })],
                RelationSatisfied,
                2,
            )
        }
        (Tier::Medium, _) => {
            let red = b.place(&mut rng, Region::TABLE, Shape::Cube, RED, CUBE);
            let blue = b.place(&mut rng, Region::TABLE, Shape::Cube, BLUE, CUBE);
            let green = b.place(&mut rng, Region::TABLE, Shape::Cube, GREEN, CUBE);
            Draft::new(b, probe).task(
                "Put the red cube on the blue cube, then the green cube on the red cube.",
                vec![
                    Goal::StackedOn { object: red, base: blue },
                    Goal::StackedOn { object: green, base: red },
                ],
                StackedOn,
                4,
            )
        }
        (Tier::Hard, 1) => {
            let peg = b.place(&mut rng, Region::TABLE, Shape::Peg, RED, PEG);
            let p = b.spot(&mut rng, Region::TABLE, PAD);
            let pad = b.add(Shape::Switch, PAD_RGB, PAD, p);
            let yaw = uniform(&mut rng, -1.2, 1.2);
            let goal = Goal::AtPosition {
                object: peg,
                position: on(&b, pad, PAD_TOP, peg),
                yaw: Some(yaw),
            };
            Draft::new(b, probe).task(
                format!(
                    "Stand the red peg on the grey pad, turned {} degrees.",
                    yaw.to_degrees().round() as i64
                ),
                vec![goal],
                AtGoalPose,
                3,
            )
        }
        (Tier::Hard, 2) => {
            let red = b.place(&mut rng, Region::TABLE, Shape::Cube, RED, CUBE);
            let blue = b.place(&mut rng, Region::TABLE, Shape::Cube, BLUE, CUBE);
            let yaw = uniform(&mut rng, -0.7, 0.7);
            let goals = vec![
                Goal::StackedOn { object: red, base: blue },
                Goal::AtPosition { object: red, position: on(&b, blue, CUBE, red), yaw: Some(yaw) },
            ];
            Draft::new(b, probe).task(
                format!(
                    "Stack the red cube on the blue cube, turned {} degrees.",
                    yaw.to_degrees().round() as i64
                ),
                goals,
                StackedOn,
                3,
            )
        }
        (Tier::Hard, _) => {
            let r = b.spot(&mut rng, CENTER, clearance(Shape::Cube, CUBE));
            let ref_yaw = uniform(&mut rng, -0.7, 0.7);
            let blue = b.add(Shape::Cube, BLUE, CUBE, r);
            let o = b.object_mut(blue);
            *o = o.clone().with_yaw(ref_yaw);
            let target = [r[0], r[1] - RELATION_OFFSET];
            b.reserve(target, 0.05);
            let peg = far_from(&mut b, &mut rng, r, Shape::Peg, RED, PEG);
            let goals = vec![
                Goal::AtPosition {
                    object: peg,
                    position: [target[0], target[1], b.rest_z(peg)],
                    yaw: Some(ref_yaw),
                },
                rel(peg, Relation::RightOf { reference: blue }),
            ];
            Draft::new(b, probe).task(
                "Stand the red peg to the right of the blue cube, turned to match it.",
                goals,
                RelationSatisfied,
                3,
            )
        }
    })
}

fn robustness(t: TemplateRef, seed: u64, variant: &Variant) -> Result<Draft, TaskError> {
    let base_tier = if t.tier == Tier::Hard { Tier::Medium } else { Tier::Easy };
    let base = TemplateRef {
        family: Family::Control,
        tier: base_tier,
        template_id: t.template_id,
    };
    let b = SceneBuilder::new(scene_label(t, seed));
    match t.tier {
        Tier::Easy => {
            let default = 1 + bounded(&mut probe_rng(t, seed), 2);
            let n = probe_u64(variant, 1, 2, default)?;
            let mut rng = fixed_rng(base, seed);
            let (mut d, movers) = control(base.tier, base.template_id, &mut rng, b, Region::TABLE, ("distractors", json!(n)));
            let mut drng = seeded(seed, &format!("Robustness/Easy/{}/distractors", t.template_id));
            let used: Vec<&str> = movers.iter().map(|(_, c)| *c).collect();
            let colors: Vec<&str> = ["green", "blue", "yellow", "purple", "orange", "cyan", "white"]
                .into_iter()
                .filter(|c| !used.contains(c))
                .collect();
            let mut picks = Vec::new();
            for _ in 0..2 {
                let shape = *choose(&mut drng, &[Shape::Cube, Shape::Sphere, Shape::Cylinder]);
                let c = *choose(&mut drng, &colors);
                let size = uniform(&mut drng, 0.03, 0.05);
                let p = d.b.spot(&mut drng, Region::TABLE, clearance(shape, size));
                picks.push((shape, c, size, p));
            }
            for (shape, c, size, p) in picks.into_iter().take(n as usize) {
                let id = d.b.add(shape, color(c).unwrap(), size, p);
                d.hidden.push((id, Hide::All));
            }
            Ok(d)
        }
        Tier::Medium => {
            let default = *choose(&mut probe_rng(t, seed), &NOVEL_COLORS);
            let name = match &variant.probe {
                None => default,
                Some(v) => NOVEL_COLORS
                    .iter()
                    .copied()
                    .find(|c| json!(c) == *v)
                    .ok_or_else(|| TaskError::InvalidProbe(format!("color {v} is not a novel color")))?,
            };
            let mut rng = fixed_rng(base, seed);
            let (mut d, movers) = control(base.tier, base.template_id, &mut rng, b, Region::TABLE, ("color", json!(name)));
            for (id, old) in movers {
                d.b.object_mut(id).color = color(name).unwrap();
                d.instruction = d.instruction.replace(old, name);
                d.hidden.push((id, Hide::Color));
            }
            Ok(d)
        }
        Tier::Hard => {
            let default = bounded(&mut probe_rng(t, seed), 4);
            let layout = probe_u64(variant, 0, 3, default)?;
            let mut rng = seeded(seed, &format!("Robustness/Hard/{}/layout/{layout}", t.template_id));
            let (mut d, _) = control(base.tier, base.template_id, &mut rng, b, Region::TABLE, ("layout", json!(layout)));
            let ids: Vec<ObjectId> = d.b.scene.objects.iter().map(|o| o.id).collect();
            d.hidden.extend(ids.into_iter().map(|id| (id, Hide::Position)));
            d.fixed_goals = false;
            Ok(d)
        }
    }
}
