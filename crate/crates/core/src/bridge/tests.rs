use std::io::Cursor;
use std::os::unix::net::UnixStream;
use std::thread;

use proptest::prelude::*;

use super::*;
use crate::episode::{Family, Tier};
use crate::policy::PolicyHandle;
use crate::sim::{observe, DEFAULT_DT};
use crate::taskgen::generate_task;

fn sample_obs(size: u32) -> Observation {
    let (_, s) = generate_task(Family::Control, Tier::Easy, 1, 0).unwrap();
    observe(&s, size, &[], DEFAULT_DT)
}

/// Harness handle talking to `policy` served on a socket pair.
fn paired(
    policy: Box<dyn Policy>,
    dof: Option<u32>,
    timeout: Duration,
) -> (PolicyHandle, thread::JoinHandle<SessionSummary>) {
    let (a, b) = UnixStream::pair().unwrap();
    let server = thread::spawn(move || {
        let mut policy = policy;
        let mut r = b.try_clone().unwrap();
        let mut w = b;
        serve_policy_session(&mut r, &mut w, policy.as_mut(), dof)
    });
    let r = a.try_clone().unwrap();
    let p = BridgePolicy::connect(Box::new(r), Box::new(a), timeout);
    (PolicyHandle::new("bridge", EmbodimentConfig::desk_arm(), Box::new(p)), server)
}

#[test]
fn frame_length_counts_type_byte() {
    let f = Frame { kind: FrameType::Bye, payload: vec![] };
    assert_eq!(f.to_bytes(), vec![1, 0, 0, 0, 6]);
    let f = Frame::json(FrameType::Act, &json!({"values": [0.0]}));
    let bytes = f.to_bytes();
    assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
    assert_eq!(read_frame(&mut Cursor::new(bytes)).unwrap(), f);
}

#[test]
fn bad_frames_are_rejected() {
    assert!(matches!(read_frame(&mut Cursor::new(vec![])), Err(BridgeError::Closed)));
    assert!(matches!(read_frame(&mut Cursor::new(vec![0, 0, 0, 0])), Err(BridgeError::BadLength(0))));
    assert!(matches!(
        read_frame(&mut Cursor::new(vec![255, 255, 255, 255])),
        Err(BridgeError::BadLength(_))
    ));
    assert!(matches!(read_frame(&mut Cursor::new(vec![1, 0, 0, 0, 9])), Err(BridgeError::UnknownType(9))));
    assert!(matches!(read_frame(&mut Cursor::new(vec![5, 0, 0, 0, 4, 1])), Err(BridgeError::Malformed(_))));
    assert!(matches!(read_frame(&mut Cursor::new(vec![5, 0])), Err(BridgeError::Malformed(_))));
}

#[test]
fn obs_roundtrip() {
    let obs = sample_obs(4);
    let bytes = encode_obs(&obs, "desk-arm-7", &CameraId::ALL);
    assert_eq!(decode_obs(&bytes).unwrap(), obs);
    let sub = decode_obs(&encode_obs(&obs, "desk-arm-7", &[CameraId::Wrist])).unwrap();
    assert_eq!(sub.views.keys().copied().collect::<Vec<_>>(), vec![CameraId::Wrist]);
    assert_eq!(sub.q, obs.q);
}

#[test]
fn obs_size_mismatch_is_rejected() {
    let obs = sample_obs(2);
    let bytes = encode_obs(&obs, "r", &CameraId::ALL);
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_obs(&long).is_err());
    assert!(decode_obs(&bytes[..bytes.len() - 1]).is_err());
    assert!(decode_obs(&bytes[..3]).is_err());
    // Inflate a declared image size in the header.
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    let header = String::from_utf8(bytes[4..4 + hlen].to_vec()).unwrap();
    let forged = header.replacen("\"bytes\":12", "\"bytes\":13", 1);
    assert_ne!(forged, header);
    let mut out = (forged.len() as u32).to_le_bytes().to_vec();
    out.extend_from_slice(forged.as_bytes());
    out.extend_from_slice(&bytes[4 + hlen..]);
    assert!(decode_obs(&out).is_err());
}

#[test]
fn echo_session_returns_zeros() {
    let (mut h, server) = paired(Box::new(EchoPolicy::new()), None, DEFAULT_TIMEOUT);
    assert_eq!(h.mode(), Mode::ExternalBridge);
    let obs = sample_obs(2);
    assert!(matches!(h.act(&obs, None), Err(PolicyError::ProtocolViolation(_))));
    for episode in 0..2 {
        h.reset(&format!("episode {episode}"), &EmbodimentConfig::desk_arm()).unwrap();
        for _ in 0..3 {
            let a = h.act(&obs, None).unwrap();
            assert_eq!(a, Action::zeros(8));
        }
    }
    drop(h);
    let summary = server.join().unwrap();
    assert_eq!(summary, SessionSummary { resets: 2, observations: 6, actions: 6, error: None });
}

struct WrongLength;

impl Policy for WrongLength {
    fn reset(&mut self, _: &str, _: &EmbodimentConfig) -> Result<(), PolicyError> {
        Ok(())
    }
    fn act(&mut self, _: &PolicyInput<'_>) -> Result<Action, PolicyError> {
        Ok(Action(vec![0.0; 3]))
    }
}

#[test]
fn wrong_action_length_aborts() {
    let (mut h, server) = paired(Box::new(WrongLength), None, DEFAULT_TIMEOUT);
    h.reset("x", &EmbodimentConfig::desk_arm()).unwrap();
    assert!(matches!(h.act(&sample_obs(2), None), Err(PolicyError::MalformedAction(_))));
    // The session is dead from here on.
    assert!(h.act(&sample_obs(2), None).is_err());
    drop(h);
    let summary = server.join().unwrap();
    assert!(summary.error.unwrap().contains("MalformedFrame"));
}

#[test]
fn handshake_dof_mismatch() {
    let (mut h, _server) = paired(Box::new(EchoPolicy::new()), Some(6), DEFAULT_TIMEOUT);
    assert_eq!(
        h.reset("x", &EmbodimentConfig::desk_arm()),
        Err(PolicyError::EmbodimentMismatch { expected: 6, got: 7 })
    );
}

struct Slow;

impl Policy for Slow {
    fn reset(&mut self, _: &str, _: &EmbodimentConfig) -> Result<(), PolicyError> {
        Ok(())
    }
    fn act(&mut self, _: &PolicyInput<'_>) -> Result<Action, PolicyError> {
        thread::sleep(Duration::from_millis(300));
        Ok(Action::zeros(8))
    }
}

#[test]
fn slow_peer_times_out() {
    let (mut h, _server) = paired(Box::new(Slow), None, Duration::from_millis(50));
    h.reset("x", &EmbodimentConfig::desk_arm()).unwrap();
    assert_eq!(
        h.act(&sample_obs(0), None),
        Err(PolicyError::BridgeTimeout(Duration::from_millis(50)))
    );
}

#[test]
fn closed_peer_is_disconnect() {
    let (a, b) = UnixStream::pair().unwrap();
    drop(b);
    let r = a.try_clone().unwrap();
    let mut p = BridgePolicy::connect(Box::new(r), Box::new(a), DEFAULT_TIMEOUT);
    assert!(matches!(
        p.reset("x", &EmbodimentConfig::desk_arm()),
        Err(PolicyError::BridgeDisconnected(_))
    ));
}

#[test]
fn child_process_that_exits_is_disconnect() {
    let mut h = crate::policy::from_selector("bridge:exit 0", &EmbodimentConfig::desk_arm()).unwrap();
    assert!(matches!(
        h.reset("x", &EmbodimentConfig::desk_arm()),
        Err(PolicyError::BridgeDisconnected(_))
    ));
}

#[test]
fn server_rejects_out_of_order_frames() {
    let mut input = Frame::json(FrameType::Reset, &json!({})).to_bytes();
    input.extend(Frame::json(FrameType::Bye, &json!({})).to_bytes());
    let mut out = Vec::new();
    let s = serve_policy_session(&mut Cursor::new(input), &mut out, &mut EchoPolicy::new(), None);
    assert!(s.error.unwrap().contains("RESET before HELLO"));
    let reply = read_frame(&mut Cursor::new(out)).unwrap();
    assert_eq!(reply.kind, FrameType::Err);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn random_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
        let mut out = Vec::new();
        let s = serve_policy_session(&mut Cursor::new(bytes), &mut out, &mut EchoPolicy::new(), None);
        // Either a clean BYE or an error; any reply must itself be well-framed.
        let mut c = Cursor::new(out);
        while (c.position() as usize) < c.get_ref().len() {
            prop_assert!(read_frame(&mut c).is_ok());
        }
        let _ = s;
    }

    #[test]
    fn fuzzed_length_prefixes(len in any::<u32>(), kind in any::<u8>(), tail in proptest::collection::vec(any::<u8>(), 0..64)) {
        let mut bytes = len.to_le_bytes().to_vec();
        bytes.push(kind);
        bytes.extend(tail);
        let r = read_frame(&mut Cursor::new(bytes.clone()));
        if let Ok(f) = r {
            prop_assert_eq!(f.to_bytes().len(), len as usize + 4);
            prop_assert!(bytes.len() >= len as usize + 4);
        }
    }

    #[test]
    fn mutated_obs_never_panics(pos in 0usize..4096, byte in any::<u8>()) {
        let mut bytes = encode_obs(&sample_obs(2), "r", &CameraId::ALL);
        let i = pos % bytes.len();
        bytes[i] = byte;
        let _ = decode_obs(&bytes);
    }
}

#[test]
fn announced_resources_pass_through() {
    let (a, mut b) = UnixStream::pair().unwrap();
    let peer = thread::spawn(move || {
        let mut r = b.try_clone().unwrap();
        let hello: Hello = read_frame(&mut r).unwrap().parse_json().unwrap();
        let reply = json!({"protocol_version": 1, "dof": hello.dof, "artifact_bytes": 1_200_000_000u64});
        write_frame(&mut b, &Frame::json(FrameType::Hello, &reply)).unwrap();
        assert_eq!(read_frame(&mut r).unwrap().kind, FrameType::Reset);
    });
    let r = a.try_clone().unwrap();
    let mut h = PolicyHandle::new(
        "bridge",
        EmbodimentConfig::desk_arm(),
        Box::new(BridgePolicy::connect(Box::new(r), Box::new(a), DEFAULT_TIMEOUT)),
    );
    h.reset("go", &EmbodimentConfig::desk_arm()).unwrap();
    peer.join().unwrap();
    assert_eq!(h.resources().artifact_bytes, Some(1_200_000_000));
    assert_eq!(h.resources().accelerator_mem_bytes, None);
}
