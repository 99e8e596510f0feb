//! Checks against the real MNIST files in `$MNIST_DIR` or `data/mnist`.
//! Set `LATENT_GEOM_SKIP_MNIST` to skip them when the files are absent.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::OnceLock;

use latent_geom::data::{filter_digits, load_split, Dataset, Split};
use latent_geom::training::{invert, train_logreg, train_vae, InvertConfig, TrainConfig, Vae, VaeReport};

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../data/mnist")));
    if dir.join("t10k-labels-idx1-ubyte").exists() {
        Some(dir)
    } else if std::env::var_os("LATENT_GEOM_SKIP_MNIST").is_some() {
        eprintln!("skipping: no MNIST files in {}", dir.display());
        None
    } else {
        panic!("MNIST files not found in {}; see scripts/fetch-mnist.sh", dir.display());
    }
}

fn digits() -> BTreeSet<u8> {
    [2, 4, 5, 7].into()
}

struct Fixture {
    train: Dataset,
    test: Dataset,
    vae: Vae,
    report: VaeReport,
}

fn fixture() -> Option<&'static Fixture> {
    static CELL: OnceLock<Option<Fixture>> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = mnist_dir()?;
        let train = filter_digits(&load_split(&dir, Split::Train).unwrap(), &digits()).unwrap();
        let test = filter_digits(&load_split(&dir, Split::Test).unwrap(), &digits()).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            sigma_epochs: 2,
            ..TrainConfig::default()
        };
        let (vae, report) = train_vae(&train, &cfg).unwrap();
        Some(Fixture {
            train,
            test,
            vae,
            report,
        })
    })
    .as_ref()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

#[test]
fn filtered_counts_match_raw_label_bytes() {
    let Some(dir) = mnist_dir() else { return };
    for (split, file) in [(Split::Test, "t10k-labels-idx1-ubyte"), (Split::Train, "train-labels-idx1-ubyte")] {
        let raw = std::fs::read(dir.join(file)).unwrap();
        let oracle = raw[8..].iter().filter(|b| [2, 4, 5, 7].contains(*b)).count();
        let ds = filter_digits(&load_split(&dir, split).unwrap(), &digits()).unwrap();
        assert_eq!(ds.len(), oracle);
    }
    let test = filter_digits(&load_split(&dir, Split::Test).unwrap(), &digits()).unwrap();
    assert_eq!(test.len(), 3934);
}

#[test]
fn held_out_elbo_improves_in_most_epochs() {
    let Some(f) = fixture() else { return };
    let h = &f.report.elbo_history;
    let better = h.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(better * 5 >= 4 * (h.len() - 1), "{h:?}");
}

/// Mean silhouette of the encoded means of 1000 test images against labels.
#[test]
fn encoded_test_set_clusters_by_digit() {
    let Some(f) = fixture() else { return };
    let n = 1000;
    let z: Vec<Vec<f64>> = (0..n).map(|i| f.vae.encoder.encode(f.test.image(i)).unwrap().0).collect();
    let labels = &f.test.labels()[..n];
    let classes: Vec<u8> = digits().into_iter().collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for j in 0..n {
            if i != j {
                let c = classes.iter().position(|&c| c == labels[j]).unwrap();
                sums[c] += sq_dist(&z[i], &z[j]).sqrt();
                counts[c] += 1;
            }
        }
        let own = classes.iter().position(|&c| c == labels[i]).unwrap();
        let a = sums[own] / counts[own] as f64;
        let b = (0..classes.len())
            .filter(|&c| c != own)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        total += (b - a) / a.max(b);
    }
    let silhouette = total / n as f64;
    assert!(silhouette > 0.0, "silhouette {silhouette}");
}

#[test]
fn reconstructions_beat_the_mean_image() {
    let Some(f) = fixture() else { return };
    let dim = f.test.image_dim();
    let mut mean = vec![0.0; dim];
    for i in 0..f.test.len() {
        for (m, x) in mean.iter_mut().zip(f.test.image(i)) {
            *m += x / f.test.len() as f64;
        }
    }
    let better = (0..f.test.len())
        .filter(|&i| {
            let x = f.test.image(i);
            let z = f.vae.encoder.encode(x).unwrap();
            let recon = f.vae.generator.mean(&z.0).unwrap();
            sq_dist(&recon, x) < sq_dist(&mean, x)
        })
        .count();
    assert!(better as f64 >= 0.9 * f.test.len() as f64, "{better} of {}", f.test.len());
}

#[test]
fn inversion_matches_or_beats_the_encoder() {
    let Some(f) = fixture() else { return };
    let gen = &f.vae.generator;
    let wins = (0..50)
        .filter(|&i| {
            let x = f.test.image(i * 7);
            let z = f.vae.encoder.encode(x).unwrap();
            let encoded = sq_dist(&gen.mean(&z.0).unwrap(), x);
            let (_, loss) = invert(gen, x, &InvertConfig::default()).unwrap();
            loss <= encoded
        })
        .count();
    assert!(wins >= 40, "{wins} of 50");
}

#[test]
fn logistic_regression_test_accuracy() {
    let Some(f) = fixture() else { return };
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let (map, _) = train_logreg(&f.train, &cfg).unwrap();
    let hits = (0..f.test.len())
        .filter(|&i| {
            let p = map.forward(f.test.image(i)).unwrap();
            let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            best == f.test.label(i) as usize
        })
        .count();
    let acc = hits as f64 / f.test.len() as f64;
    assert!(acc >= 0.90, "accuracy {acc}");
}
