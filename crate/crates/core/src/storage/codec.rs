//! Little-endian record payload encoding for one [`Episode`].
//!
//! Strings and vectors carry a `u32` length. Images are stored raw; their
//! payload length is implied by `width * height * stride`.

use std::collections::BTreeMap;

use crate::episode::{
    Action, CameraId, CameraViews, EmbodimentConfig, Episode, Family, Gripper, Image, Modality,
    Observation, Step, TaskMeta, Tier,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeError(pub String);

impl std::fmt::Display for DecodeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn err<T>(msg: impl Into<String>) -> Result<T, DecodeError> {
    Err(DecodeError(msg.into()))
}

pub(crate) struct Encoder {
    pub buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder { buf: Vec::new() }
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len() as u32);
        for x in v {
            self.f64(*x);
        }
    }
}

pub(crate) struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Decoder { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| {
                DecodeError(format!(
                    "need {n} bytes at offset {}, payload has {}",
                    self.pos,
                    self.data.len()
                ))
            })?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => err(format!("invalid boolean byte {b}")),
        }
    }

    pub fn str(&mut self) -> Result<String, DecodeError> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).or_else(|_| err("string is not UTF-8"))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, DecodeError> {
        let n = self.u32()? as usize;
        if n > self.remaining() / 8 {
            return err(format!("vector of {n} floats exceeds payload"));
        }
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return err(format!("{} trailing bytes after record", self.remaining()));
        }
        Ok(())
    }
}

fn gripper_code(g: Gripper) -> u8 {
    match g {
        Gripper::ParallelJaw => 0,
        Gripper::Suction => 1,
        Gripper::None => 2,
    }
}

fn gripper_from(code: u8) -> Result<Gripper, DecodeError> {
    match code {
        0 => Ok(Gripper::ParallelJaw),
        1 => Ok(Gripper::Suction),
        2 => Ok(Gripper::None),
        _ => err(format!("unknown gripper code {code}")),
    }
}

pub(crate) fn encode_embodiment(e: &mut Encoder, emb: &EmbodimentConfig) {
    e.str(&emb.robot_id);
    e.u32(emb.dof);
    e.u8(gripper_code(emb.gripper));
    e.u32(emb.arm_count);
    e.u32(emb.joint_limits.len() as u32);
    for (lo, hi) in &emb.joint_limits {
        e.f64(*lo);
        e.f64(*hi);
    }
}

pub(crate) fn decode_embodiment(d: &mut Decoder<'_>) -> Result<EmbodimentConfig, DecodeError> {
    let robot_id = d.str()?;
    let dof = d.u32()?;
    let gripper = gripper_from(d.u8()?)?;
    let arm_count = d.u32()?;
    let n = d.u32()? as usize;
    if n > d.remaining() / 16 {
        return err("joint limit table exceeds payload");
    }
    let joint_limits = (0..n)
        .map(|_| Ok((d.f64()?, d.f64()?)))
        .collect::<Result<Vec<_>, DecodeError>>()?;
    Ok(EmbodimentConfig {
        robot_id,
        dof,
        gripper,
        arm_count,
        joint_limits,
    })
}

fn encode_image(e: &mut Encoder, img: &Image) {
    e.u8(img.modality.code());
    e.u32(img.width);
    e.u32(img.height);
    e.buf.extend_from_slice(&img.data);
}

fn decode_image(d: &mut Decoder<'_>) -> Result<Image, DecodeError> {
    let code = d.u8()?;
    let modality =
        Modality::from_code(code).ok_or_else(|| DecodeError(format!("unknown modality {code}")))?;
    let width = d.u32()?;
    let height = d.u32()?;
    let len = (width as usize)
        .checked_mul(height as usize)
        .and_then(|n| n.checked_mul(modality.stride()))
        .ok_or_else(|| DecodeError("image dimensions overflow".into()))?;
    let data = d.take(len)?.to_vec();
    Ok(Image {
        width,
        height,
        modality,
        data,
    })
}

/// Serializes one episode into a record payload.
pub fn encode_episode(ep: &Episode) -> Vec<u8> {
    let mut e = Encoder::new();
    e.str(&ep.episode_id);
    e.str(&ep.instruction);
    encode_embodiment(&mut e, &ep.embodiment);
    let m = &ep.task_meta;
    e.u8(m.family.code());
    e.u8(m.tier.code());
    e.u8(m.template_id);
    e.u64(m.seed);
    e.str(&m.variant_tag);
    e.bool(ep.final_success);
    e.u32(ep.steps.len() as u32);
    for step in &ep.steps {
        e.u32(step.index);
        let obs = &step.observation;
        e.u64(obs.t);
        e.f64(obs.wall_time);
        e.f64s(&obs.q);
        e.f64s(&obs.q_dot);
        e.f64s(step.action.values());
        e.bool(step.success);
        e.u8(obs.views.len() as u8);
        for (camera, views) in &obs.views {
            e.u8(camera.code());
            for img in views.iter() {
                encode_image(&mut e, img);
            }
        }
    }
    e.buf
}

/// Inverse of [`encode_episode`].
pub fn decode_episode(payload: &[u8]) -> Result<Episode, DecodeError> {
    let mut d = Decoder::new(payload);
    let episode_id = d.str()?;
    let instruction = d.str()?;
    let embodiment = decode_embodiment(&mut d)?;
    let fam = d.u8()?;
    let family = Family::from_code(fam).ok_or_else(|| DecodeError(format!("unknown family {fam}")))?;
    let tier_code = d.u8()?;
    let tier =
        Tier::from_code(tier_code).ok_or_else(|| DecodeError(format!("unknown tier {tier_code}")))?;
    let template_id = d.u8()?;
    let seed = d.u64()?;
    let variant_tag = d.str()?;
    let final_success = d.bool()?;
    let n_steps = d.u32()? as usize;
    let mut steps = Vec::with_capacity(n_steps.min(d.remaining()));
    for _ in 0..n_steps {
        let index = d.u32()?;
        let t = d.u64()?;
        let wall_time = d.f64()?;
        let q = d.f64s()?;
        let q_dot = d.f64s()?;
        let action = Action(d.f64s()?);
        let success = d.bool()?;
        let n_views = d.u8()?;
        let mut views = BTreeMap::new();
        for _ in 0..n_views {
            let cam_code = d.u8()?;
            let camera = CameraId::from_code(cam_code)
                .ok_or_else(|| DecodeError(format!("unknown camera {cam_code}")))?;
            let rgb = decode_image(&mut d)?;
            let depth = decode_image(&mut d)?;
            let segmentation = decode_image(&mut d)?;
            if views
                .insert(
                    camera,
                    CameraViews {
                        rgb,
                        depth,
                        segmentation,
                    },
                )
                .is_some()
            {
                return err(format!("camera {camera} appears twice"));
            }
        }
        steps.push(Step {
            index,
            observation: Observation {
                views,
                q,
                q_dot,
                t,
                wall_time,
            },
            action,
            success,
        });
    }
    d.finish()?;
    Ok(Episode {
        episode_id,
        instruction,
        embodiment,
        task_meta: TaskMeta {
            family,
            tier,
            template_id,
            seed,
            variant_tag,
        },
        steps,
        final_success,
    })
}
