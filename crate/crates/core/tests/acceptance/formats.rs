//! Loader fixtures built byte by byte, and checkpoint round trips.

use std::fs;
use std::path::Path;

use lamarck::data::{load_cifar, load_idx, load_idx_dir, synth_dataset, CifarVariant, SynthSpec};
use lamarck::evolution::EAConfig;
use lamarck::fitness::{accuracy, evaluate, TrainProtocol};
use lamarck::genome::{forward_infer, random_initial_genome, Checkpoint, ImageDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{ensure, Outcome};

fn be(v: u32) -> [u8; 4] {
    v.to_be_bytes()
}

/// IDX: magic 0x00000803 with three big-endian dims, then row-major pixels;
/// labels: magic 0x00000801, count, one byte per label.
fn idx_fixture(dir: &Path, prefix: &str, n: usize, rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let pixels: Vec<u8> = (0..n * rows * cols).map(|_| rng.random()).collect();
    let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..10)).collect();
    let mut img = vec![0, 0, 8, 3];
    img.extend(be(n as u32));
    img.extend(be(rows as u32));
    img.extend(be(cols as u32));
    img.extend(&pixels);
    let mut lbl = vec![0, 0, 8, 1];
    lbl.extend(be(n as u32));
    lbl.extend(&labels);
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lbl).unwrap();
    (pixels, labels)
}

fn check_idx(dir: &Path) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (pixels, labels) = idx_fixture(dir, "train", 5, 3, 4, &mut rng);
    let split = load_idx(&dir.join("train-images-idx3-ubyte"), &dir.join("train-labels-idx1-ubyte"))
        .map_err(|e| e.to_string())?;
    ensure!(split.images().shape() == [5, 3, 4, 1], "idx shape {:?}", split.images().shape());
    ensure!(
        split.labels().iter().zip(&labels).all(|(&a, &b)| a == usize::from(b)),
        "idx labels differ"
    );
    for (i, (&got, &byte)) in split.images().data().iter().zip(&pixels).enumerate() {
        ensure!(got == f32::from(byte) / 255.0, "idx pixel {i}: {got} vs byte {byte}");
    }
    idx_fixture(dir, "t10k", 2, 3, 4, &mut rng);
    let pool = load_idx_dir(dir, 10).map_err(|e| e.to_string())?;
    ensure!(pool.train.len() == 5 && pool.test.as_ref().map(|t| t.len()) == Some(2), "idx pool sizes");

    fs::write(dir.join("bad"), [0, 0, 8, 2, 0, 0, 0, 0]).unwrap();
    ensure!(load_idx(&dir.join("bad"), &dir.join("train-labels-idx1-ubyte")).is_err(), "bad magic accepted");
    Ok(())
}

/// CIFAR: per record, label byte(s) then 1024 red, 1024 green, 1024 blue
/// bytes, each plane row-major. CIFAR-100 stores coarse then fine label.
fn check_cifar(dir: &Path) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for variant in [CifarVariant::Cifar10, CifarVariant::Cifar100] {
        let sub = dir.join(format!("{variant:?}"));
        fs::create_dir_all(&sub).unwrap();
        let (train_files, test_file, classes): (&[&str], &str, u8) = match variant {
            CifarVariant::Cifar10 => (
                &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
                "test_batch.bin",
                10,
            ),
            CifarVariant::Cifar100 => (&["train.bin"], "test.bin", 100),
        };
        let mut expected = Vec::new();
        for name in train_files.iter().chain([&test_file]) {
            let mut bytes = Vec::new();
            for _ in 0..2 {
                let fine: u8 = rng.random_range(0..classes);
                if variant == CifarVariant::Cifar100 {
                    bytes.push(rng.random_range(0..20));
                }
                bytes.push(fine);
                let planes: Vec<u8> = (0..3 * 1024).map(|_| rng.random()).collect();
                bytes.extend(&planes);
                expected.push((fine, planes));
            }
            fs::write(sub.join(name), bytes).unwrap();
        }
        let pool = load_cifar(&sub, variant).map_err(|e| e.to_string())?;
        let test = pool.test.ok_or("missing test split")?;
        let splits = [&pool.train, &test];
        let mut idx = 0;
        for split in splits {
            ensure!(split.images().shape()[1..] == [32, 32, 3], "{variant:?} image shape");
            for r in 0..split.len() {
                let (fine, planes) = &expected[idx];
                idx += 1;
                ensure!(split.labels()[r] == usize::from(*fine), "{variant:?} record {idx} label");
                let img = &split.images().data()[r * 3072..(r + 1) * 3072];
                for row in 0..32 {
                    for col in 0..32 {
                        for c in 0..3 {
                            let byte = planes[c * 1024 + row * 32 + col];
                            let got = img[(row * 32 + col) * 3 + c];
                            ensure!(got == f32::from(byte) / 255.0, "{variant:?} record {idx} pixel ({row},{col},{c})");
                        }
                    }
                }
            }
        }
        ensure!(idx == expected.len(), "{variant:?}: decoded {idx} of {} records", expected.len());
    }
    Ok(())
}

fn check_checkpoint(dir: &Path) -> Result<(), String> {
    let spec = SynthSpec {
        num_classes: 3,
        height: 8,
        width: 8,
        channels: 2,
        n_per_class: 20,
        difficulty: 0.8,
    };
    let data = synth_dataset(&spec, 3);
    let cfg = EAConfig {
        num_classes: 3,
        image: ImageDims {
            height: 8,
            width: 8,
            channels: 2,
        },
        ..EAConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..3u64 {
        let (mut g, mut w) = (ChaCha8Rng::seed_from_u64(trial), ChaCha8Rng::seed_from_u64(trial + 100));
        let mut ind = random_initial_genome(&cfg, trial, &mut g, &mut w);
        let proto = TrainProtocol {
            epochs: 2,
            batch_size: 16,
            learning_rate: 1e-2,
        };
        let (fitness, _) = evaluate(&mut ind, &data, &proto, &mut rng).map_err(|e| e.to_string())?;
        let path = dir.join(format!("ckpt_{trial}.lmk"));
        Checkpoint {
            individual: ind.clone(),
            in_channels: 2,
            cumulative_epochs: 64 * trial,
        }
        .save(&path)
        .map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        ensure!(back.cumulative_epochs == 64 * trial, "tag lost");
        ensure!(back.individual.genome == ind.genome, "genome lost");
        ensure!(back.individual.weights == ind.weights, "weights differ after reload");
        let acc = accuracy(&back.individual.genome, &back.individual.weights, &data.val, 16).map_err(|e| e.to_string())?;
        ensure!(acc.to_bits() == fitness.to_bits(), "trial {trial}: accuracy {acc} vs {fitness}");
        let before = forward_infer(&ind.genome, &ind.weights, data.val.images()).map_err(|e| e.to_string())?;
        let after = forward_infer(&back.individual.genome, &back.individual.weights, data.val.images())
            .map_err(|e| e.to_string())?;
        ensure!(
            before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
            "trial {trial}: logits differ"
        );
    }
    Ok(())
}

pub fn run() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    check_idx(dir.path())?;
    check_cifar(dir.path())?;
    check_checkpoint(dir.path())?;
    Ok("IDX images/labels, CIFAR-10/100 binaries and 3 checkpoints round-trip exactly".into())
}
