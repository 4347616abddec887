use std::path::Path;

use synlungs_core::dataset::{check_closure, read_dataset_info, read_manifest};
use synlungs_core::pipeline::{parse_config_str, run_pipeline, PipelineConfig};

fn small(out: &Path, n_twins: usize) -> PipelineConfig {
    let mut cfg = parse_config_str(
        r#"
        seed = 21
        lesions_per_twin = [1, 2]
        scanners = ["W12", "W20"]
        filter_cutoffs = [0.6, 1.2]
        n_views = 90
        phantom_dims = [40, 40, 32]
        phantom_spacing = [5.0, 5.0, 5.0]
        recon_dims = [40, 40]
        out_spacing = 5.0
        "#,
    )
    .unwrap();
    cfg.n_twins = n_twins;
    cfg.output_dir = out.to_path_buf();
    cfg
}

#[test]
fn dataset_is_closed_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path(), 2);
    let report = run_pipeline(&cfg).unwrap();
    assert!(report.failed_twins.is_empty(), "{:?}", report.failed_twins);
    assert_eq!(report.n_scans, 2 * 2 * 2);

    let m = read_manifest(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(m.dataset_seed, 21);
    assert_eq!(m.scan_ids().len(), report.n_scans);
    assert_eq!(m.rows.len(), report.n_lesions * cfg.n_scans_per_twin());
    check_closure(dir.path(), &m).unwrap();

    let info = read_dataset_info(&dir.path().join("dataset.json")).unwrap();
    assert_eq!(info.n_scans, report.n_scans);
    assert_eq!(info.filter_cutoffs, vec![0.6, 1.2]);
}

#[test]
fn adding_twins_leaves_earlier_twins_alone() {
    let one = tempfile::tempdir().unwrap();
    let two = tempfile::tempdir().unwrap();
    run_pipeline(&small(one.path(), 1)).unwrap();
    run_pipeline(&small(two.path(), 2)).unwrap();
    for sub in ["volumes", "masks"] {
        for e in std::fs::read_dir(one.path().join(sub)).unwrap() {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap();
            let other = two.path().join(sub).join(name);
            assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&other).unwrap(), "{}", p.display());
        }
    }
}
