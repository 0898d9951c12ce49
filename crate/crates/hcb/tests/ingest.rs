use std::path::Path;

use hcb::imageio::save_png;
use hcb::ingest::{ingest_dataset, NamePattern, SkipReason};
use hcb_core::image::Image;

fn gray(w: usize, h: usize) -> Image<u8> {
    Image::from_planes(w, h, vec![120u8; 3 * w * h]).unwrap()
}

fn touch(path: &Path, bytes: &[u8]) {
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn dresden_style_names() {
    let p = NamePattern::default();
    assert_eq!(
        p.parse("Kodak_M1063_0_9523.JPG"),
        Some(("Kodak".into(), "M1063".into(), 0, "9523".into()))
    );
    // models may contain underscores; the device is the last numeric field
    assert_eq!(
        p.parse("Nikon_D70s_1_23456.jpg"),
        Some(("Nikon".into(), "D70s".into(), 1, "23456".into()))
    );
    assert_eq!(
        p.parse("Sony_DSC-H50_Extra_2_77.png"),
        Some(("Sony".into(), "DSC-H50_Extra".into(), 2, "77".into()))
    );
    assert_eq!(p.parse("notes.txt"), None);
    assert_eq!(p.parse("Kodak_M1063_x_9523.JPG"), None);
    assert!(NamePattern::new(r"^(?P<brand>\w+)$").is_err());
    assert!(NamePattern::new(r"(").is_err());
}

#[test]
fn unreadable_files_are_skipped_not_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut n = 0;
    for (brand, model) in [("Kodak", "M1063"), ("Sony", "H50")] {
        for device in 0..2 {
            for id in 0..3 {
                if n < 10 {
                    save_png(&root.join(brand).join(format!("{brand}_{model}_{device}_{id}.png")), &gray(130, 140)).unwrap();
                } else {
                    touch(&root.join(brand).join(format!("{brand}_{model}_{device}_{id}.jpg")), b"not a jpeg at all");
                }
                n += 1;
            }
        }
    }
    let out = ingest_dataset(root, &NamePattern::default(), 128).unwrap();
    assert_eq!(out.manifest.len(), 10);
    assert_eq!(out.skips.skipped.len(), 2);
    for s in &out.skips.skipped {
        assert!(matches!(s.reason, SkipReason::UnreadableHeader { .. }), "{s:?}");
    }
    let r = out.manifest.find("Kodak/Kodak_M1063_1_2.png").expect("relative path with forward slashes");
    assert_eq!((r.brand.as_str(), r.model.as_str(), r.device_index), ("Kodak", "M1063", 1));
    assert_eq!((r.width, r.height), (130, 140));
}

#[test]
fn small_and_unmatched_files() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    save_png(&root.join("A_m_0_1.png"), &gray(200, 127)).unwrap();
    save_png(&root.join("A_m_0_2.png"), &gray(128, 128)).unwrap();
    touch(&root.join("README.md"), b"hello");
    let out = ingest_dataset(root, &NamePattern::default(), 128).unwrap();
    assert_eq!(out.manifest.len(), 1);
    let reasons: Vec<_> = out.skips.skipped.iter().map(|s| (s.path.as_str(), &s.reason)).collect();
    assert_eq!(
        reasons,
        [("A_m_0_1.png", &SkipReason::TooSmall { width: 200, height: 127 }), ("README.md", &SkipReason::NameMismatch)]
    );
    // deterministic across calls
    let again = ingest_dataset(root, &NamePattern::default(), 128).unwrap();
    assert_eq!(again.manifest, out.manifest);
    assert_eq!(again.skips, out.skips);
}

#[test]
fn missing_root_is_an_error() {
    assert!(ingest_dataset(Path::new("/nonexistent/hcb/root"), &NamePattern::default(), 128).is_err());
}
