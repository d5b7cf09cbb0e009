use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use ndarray::Array3;
use voxflow::catalog::load_catalog;
use voxflow::model::ModelRegistry;
use voxflow::nifti_io::{read_volume, write_volume};
use voxflow::pipeline::PipelineSpec;
use voxflow::sample::affines_close;
use voxflow::{Affine, Identifier};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn voxflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxflow")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn affine(shift: f64) -> Affine {
    let mut a = Affine::identity();
    a[(0, 0)] = 1.25;
    a[(1, 1)] = 0.75;
    a[(2, 2)] = 2.0;
    a[(0, 3)] = -10.0 + shift;
    a[(2, 3)] = 5.5;
    a
}

fn flair(seed: usize) -> Array3<f64> {
    Array3::from_shape_fn((24, 22, 20), |(i, j, k)| ((i * 7 + j * 3 + k + seed) % 13) as f64 + 0.25)
}

struct Fixture {
    dir: tempfile::TempDir,
    volumes: Vec<Array3<f64>>,
}

impl Fixture {
    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_str().unwrap().to_owned()
    }
}

/// Two records; with `misaligned` the second record's label has a shifted
/// affine.
fn catalog(misaligned: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::from("version = 1\n\n[[datasets]]\nid = \"d\"\n");
    let mut volumes = Vec::new();
    for c in 0..2 {
        let x = flair(c);
        let y = x.mapv(|v| f64::from(u8::from(v > 6.0)));
        let shift = if misaligned && c == 1 { 3.0 } else { 0.0 };
        write_volume(&dir.path().join(format!("flair{c}.nii.gz")), &x.clone().into_dyn(), &affine(0.0)).unwrap();
        write_volume(&dir.path().join(format!("gt{c}.nii.gz")), &y.into_dyn(), &affine(shift)).unwrap();
        volumes.push(x);
        text.push_str(&format!(
            "\n[[datasets.cases]]\nid = \"c{c}\"\n\n[[datasets.cases.records]]\nid = \"r\"\n\n\
             [[datasets.cases.records.modalities]]\nid = \"flair\"\nkind = \"volume\"\npath = \"flair{c}.nii.gz\"\n\n\
             [[datasets.cases.records.modalities]]\nid = \"gt\"\nkind = \"volume\"\npath = \"gt{c}.nii.gz\"\n"
        ));
    }
    std::fs::write(dir.path().join("catalog.toml"), text).unwrap();
    Fixture { dir, volumes }
}

#[test]
fn inspect_exit_codes() {
    let good = catalog(false);
    let o = voxflow(&["inspect", &good.path("catalog.toml")]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("2 records, 0 inconsistencies"));

    let bad = catalog(true);
    let o = voxflow(&["inspect", &bad.path("catalog.toml"), "--modalities", "flair,gt", "--ns", "all,2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("2 records, 1 inconsistencies"), "{}", stdout(&o));

    assert_eq!(voxflow(&["inspect", &good.path("nothing.toml")]).status.code(), Some(2));
    let o = voxflow(&["inspect", &good.path("catalog.toml"), "--ns", "some"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_prints_mean_and_std() {
    let f = catalog(false);
    let check = |n: Option<usize>, used: &[Array3<f64>]| {
        let values: Vec<f64> = used.iter().flat_map(|v| v.iter().copied()).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
        let mut args = vec!["stats".to_owned(), f.path("catalog.toml"), "--modality".into(), "flair".into()];
        if let Some(n) = n {
            args.extend(["--n".to_owned(), n.to_string()]);
        }
        let o = voxflow(&args.iter().map(String::as_str).collect::<Vec<_>>());
        assert_eq!(o.status.code(), Some(0));
        let got: Vec<f64> = stdout(&o).split_whitespace().map(|t| t.parse().unwrap()).collect();
        assert!((got[0] - mean).abs() < 1e-9 && (got[1] - var.sqrt()).abs() < 1e-9, "{got:?}");
    };
    check(None, &f.volumes);
    check(Some(1), &f.volumes[..1]);
    let o = voxflow(&["stats", &f.path("catalog.toml"), "--modality", "t1"]);
    assert_eq!(o.status.code(), Some(2));
}

fn run(f: &Fixture, pipeline: &str, set: &str, out: &str, extra: &[&str]) -> Output {
    let fix = fixture(pipeline);
    let mut args = vec![
        "run",
        fix.to_str().unwrap(),
        &f.dir.path().join("catalog.toml").to_str().unwrap().to_owned(),
        "--identifier",
        "d/c1/r",
        "--set",
        set,
        "--out",
        out,
    ]
    .into_iter()
    .map(str::to_owned)
    .collect::<Vec<_>>();
    args.extend(extra.iter().map(|s| s.to_string()));
    voxflow(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn listing(dir: &str) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn grid_crop_and_put_reconstructs_the_input_file() {
    let f = catalog(false);
    let out = f.path("full");
    let o = run(&f, "reconstruct.toml", "full", &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "1 steps\n");
    assert_eq!(listing(&out), ["full_0000_0000.nii.gz"]);
    let written = read_volume(format!("{out}/full_0000_0000.nii.gz")).unwrap();
    let source = read_volume(f.path("flair1.nii.gz")).unwrap();
    assert_eq!(written.data, source.data);
    assert_eq!(written.affine, source.affine);
}

#[test]
fn training_branch_writes_eight_steps_reproducibly() {
    let f = catalog(false);
    let (a, b) = (f.path("a"), f.path("b"));
    let o = run(&f, "train.toml", "train", &a, &["--seed", "11"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o), "8 steps\n");
    assert_eq!(run(&f, "train.toml", "train", &b, &["--seed", "11"]).status.code(), Some(0));
    let names = listing(&a);
    assert_eq!(names.len(), 16);
    assert_eq!(names.first().unwrap(), "train_0000_0000.nii.gz");
    assert_eq!(names.last().unwrap(), "train_0007_0001.nii.gz");
    assert_eq!(names, listing(&b));
    for name in &names {
        assert_eq!(std::fs::read(format!("{a}/{name}")).unwrap(), std::fs::read(format!("{b}/{name}")).unwrap());
    }

    // Files read back equal the in-memory stream.
    let mut built = PipelineSpec::load(fixture("train.toml"))
        .unwrap()
        .build(&fixture(""), &ModelRegistry::with_builtins())
        .unwrap();
    built.seed = 11;
    let mut creator = built.bundle().unwrap().creator("train").unwrap();
    let mirc = Arc::new(load_catalog(f.dir.path().join("catalog.toml")).unwrap());
    let steps = creator.run(&Identifier::catalog(mirc, "d", "c1", "r").unwrap()).unwrap();
    for (s, step) in steps.iter().enumerate() {
        for (slot, samples) in step.iter().enumerate() {
            let back = read_volume(format!("{a}/train_{s:04}_{slot:04}.nii.gz")).unwrap().to_sample().unwrap();
            assert_eq!(back.data(), samples[0].data());
            assert!(affines_close(back.affine(0), samples[0].affine(0)));
        }
    }

    let c = f.path("c");
    run(&f, "train.toml", "train", &c, &["--seed", "12"]);
    assert!(names.iter().any(|n| std::fs::read(format!("{a}/{n}")).unwrap() != std::fs::read(format!("{c}/{n}")).unwrap()));
}

#[test]
fn run_error_codes() {
    let f = catalog(false);
    let out = f.path("o");
    assert_eq!(run(&f, "train.toml", "validation", &out, &[]).status.code(), Some(2));
    let fix = fixture("train.toml");
    let cat = f.path("catalog.toml");
    for id in ["d/c9/r", "d/c1", "d/c1/r/x"] {
        let o = voxflow(&["run", fix.to_str().unwrap(), &cat, "--identifier", id, "--set", "train", "--out", &out]);
        assert_eq!(o.status.code(), Some(2), "{id}");
    }
    let o = run(&f, "detached.toml", "pred", &out, &[]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Model_0"));
    assert_eq!(voxflow(&["run", "--set", "x"]).status.code(), Some(2));
}

#[test]
fn summary_lists_traced_nodes() {
    let o = voxflow(&["summary", fixture("train.toml").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.starts_with("[train]\n"));
    assert!(text.contains("[input]\n"));
    for name in ["CatalogInput_0", "AffineDeformation_0", "Flip_0", "Threshold_0", "RandomCrop_0", "Model_0"] {
        assert!(text.contains(name), "{name}");
    }
    let input_only = voxflow(&["summary", fixture("train.toml").to_str().unwrap(), "--set", "input"]);
    assert!(!stdout(&input_only).contains("Flip_0"));
    assert_eq!(stdout(&o), stdout(&voxflow(&["summary", fixture("train.toml").to_str().unwrap()])));

    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.toml");
    std::fs::write(&broken, "version = 1\n[[nodes]]\nname = 3\n").unwrap();
    assert_eq!(voxflow(&["summary", broken.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn netshape_reports() {
    let o = voxflow(&["netshape", fixture("two_pathway.toml").to_str().unwrap(), "--input-size", "85"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("receptive field: 33 33 33"));
    assert!(text.contains(" 85->53 "));
    assert!(text.ends_with("input size: 85 85 85\noutput size: 53 53 53\n"), "{text}");

    let o = voxflow(&["netshape", fixture("two_pathway.toml").to_str().unwrap()]);
    assert!(stdout(&o).contains("input size: 85 85 85"));

    let o = voxflow(&["netshape"]);
    assert!(stdout(&o).starts_with("receptive field: 185 185 185\n"));
    assert!(stdout(&o).contains("output size: 128 128 128"));

    let o = voxflow(&["netshape", fixture("two_pathway.toml").to_str().unwrap(), "--input-size", "86"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(voxflow(&["netshape", fixture("train.toml").to_str().unwrap()]).status.code(), Some(2));
    assert_eq!(voxflow(&["netshape", "--input-size", "1,2"]).status.code(), Some(2));
}
