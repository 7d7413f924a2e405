use hmr_core::blocks::{ModelConfig, ParamStore};
use hmr_core::checkpoint::Checkpoint;
use hmr_core::error::Error;
use hmr_core::tensor::Tensor;

fn store() -> ParamStore {
    ModelConfig::default().init(7).unwrap()
}

#[test]
fn round_trip_is_bit_exact() {
    let ck = Checkpoint::new(store()).with_meta("stage", "lift").with_meta("epoch", "3");
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    for ((_, a), (_, b)) in back.tensors.iter().zip(ck.tensors.iter()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn awkward_values_survive() {
    let mut s = ParamStore::new();
    s.insert("x", Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e-310, f64::MAX, 0.1 + 0.2]));
    let ck = Checkpoint::new(s);
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let (a, b) = (back.tensors.get("x").unwrap(), ck.tensors.get("x").unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn non_finite_weights_are_never_written() {
    let mut s = store();
    let name = s.names()[3].clone();
    s.get_mut(&name).unwrap().data_mut()[0] = f64::NAN;
    let err = Checkpoint::new(s).to_bytes().unwrap_err();
    assert!(matches!(err, Error::Numeric(_)));
    assert!(err.to_string().contains(&name), "{err}");
}

#[test]
fn layout_mismatch_names_tensors() {
    let full = store();
    let mut other = full.clone();
    let (a, b) = (full.names()[0].clone(), full.names()[1].clone());
    other.insert(a.clone(), Tensor::zeros(&[1, 1]));
    other.insert("extra.w", Tensor::zeros(&[2]));
    let ck = Checkpoint::from_bytes(&Checkpoint::new(other).to_bytes().unwrap()).unwrap();
    let err = ck.params_like(&full).unwrap_err().to_string();
    assert!(err.contains(&a) && err.contains("extra.w"), "{err}");
    assert!(!err.contains(&format!("'{b}'")), "{err}");
    assert_eq!(Checkpoint::new(full.clone()).params_like(&full).unwrap(), full);
}

#[test]
fn corruption_is_detected() {
    let bytes = Checkpoint::new(store()).to_bytes().unwrap();
    let mut flipped = bytes.clone();
    let i = flipped.len() - 9;
    flipped[i] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
    assert!(matches!(Checkpoint::from_bytes(b"HMRSYNTH........"), Err(Error::Format(_))));
}
