//! Fixtures shared by the CLI test targets.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use mobinc::data::Class;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn mobinc() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mobinc"))
}

/// Runs the binary and returns its output, whatever the exit status.
pub fn run(args: &[&str]) -> Output {
    mobinc().args(args).output().expect("spawn mobinc")
}

pub fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "mobinc {args:?} exited {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Blob colour per class, in `Class::ALL` order.
pub const BLOB_COLORS: [[u8; 3]; 4] = [[40, 200, 60], [200, 60, 40], [60, 80, 210], [230, 200, 40]];

/// One disc of the class colour on a noisy gray background.
pub fn blob_image(class: Class, side: u32, rng: &mut impl Rng) -> RgbImage {
    let color = BLOB_COLORS[class.index()];
    let r = rng.random_range(side as f32 * 0.2..side as f32 * 0.35);
    let cx = rng.random_range(r..side as f32 - r);
    let cy = rng.random_range(r..side as f32 - r);
    RgbImage::from_fn(side, side, |x, y| {
        let inside = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2) <= r * r;
        let noise = rng.random_range(-12i16..=12);
        let base = if inside { color } else { [110, 110, 110] };
        Rgb(base.map(|v| (v as i16 + noise).clamp(0, 255) as u8))
    })
}

/// `per_class` blob images per class under `root/<class>/`.
pub fn blob_dataset(root: &Path, per_class: usize, side: u32, seed: u64) -> PathBuf {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in Class::ALL {
        let dir = root.join(c.name());
        std::fs::create_dir_all(&dir).unwrap();
        for i in 0..per_class {
            blob_image(c, side, &mut rng).save(dir.join(format!("{i:03}.png"))).unwrap();
        }
    }
    root.to_path_buf()
}

pub fn write_config(path: &Path, lines: &[&str]) -> PathBuf {
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
    path.to_path_buf()
}
