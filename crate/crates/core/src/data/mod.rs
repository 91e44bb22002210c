//! Slice stacks: synthetic phantoms, PNG + JSON manifest ingestion,
//! preprocessing and triplet sampling.

mod image;
mod phantom;

pub use image::{
    images_to_tensor, preprocess, read_png, resize_bilinear, tensor_to_images, to_signed, to_unit,
    write_png, Image,
};
pub use phantom::{domain_b_intensity, generate_phantom, to_domain_b, Phantom, MAX_SHIFT};

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};
use crate::warp::DeformationField;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    A,
    B,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Test,
}

/// Ordered slices of one subject in one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub subject: String,
    pub domain: Domain,
    pub slices: Vec<Image>,
    /// Known in-plane translation of each slice, when synthetic.
    pub shifts: Option<Vec<[f64; 2]>>,
}

impl SliceStack {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }

    /// Exact field registering slice `k` onto slice `t` (`x_t ~ x_k o phi`),
    /// available for synthetic stacks.
    pub fn oracle_field<T: Real>(&self, t: usize, k: usize) -> Option<DeformationField<T>> {
        let shifts = self.shifts.as_ref()?;
        let (st, sk) = (shifts.get(t)?, shifts.get(k)?);
        let img = &self.slices[t];
        Some(DeformationField::constant(1, img.height, img.width, sk[0] - st[0], sk[1] - st[1]))
    }
}

/// Consecutive slices `t - 1, t, t + 1` of one stack.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceTriplet {
    pub subject: String,
    pub t: usize,
    pub prev: Image,
    pub center: Image,
    pub next: Image,
}

/// Draws `batch` triplets uniformly over all valid `(stack, t)` centers.
pub fn sample_triplets<R: Rng + ?Sized>(stacks: &[SliceStack], batch: usize, rng: &mut R) -> Result<Vec<SliceTriplet>> {
    if stacks.is_empty() {
        return Err(Error::invalid("no stacks to sample from"));
    }
    if let Some(s) = stacks.iter().find(|s| s.len() < 3) {
        return Err(Error::invalid(format!(
            "stack {} has {} slices, triplets need at least 3",
            s.subject,
            s.len()
        )));
    }
    let total = valid_centers(stacks);
    (0..batch)
        .map(|_| {
            let mut i = rng.gen_range(0..total);
            let stack = stacks
                .iter()
                .find(|s| {
                    let n = s.len() - 2;
                    if i < n {
                        true
                    } else {
                        i -= n;
                        false
                    }
                })
                .expect("index within total");
            let t = i + 1;
            Ok(SliceTriplet {
                subject: stack.subject.clone(),
                t,
                prev: stack.slices[t - 1].clone(),
                center: stack.slices[t].clone(),
                next: stack.slices[t + 1].clone(),
            })
        })
        .collect()
}

/// Number of slices that have both neighbors.
pub fn valid_centers(stacks: &[SliceStack]) -> usize {
    stacks.iter().map(|s| s.len().saturating_sub(2)).sum()
}

/// Prev, center and next tensors `[B, 1, H, W]` of a batch of triplets.
pub fn triplet_tensors<T: Real>(batch: &[SliceTriplet]) -> Result<[Tensor<T>; 3]> {
    let pick = |f: fn(&SliceTriplet) -> &Image| images_to_tensor::<T>(&batch.iter().map(f).collect::<Vec<_>>());
    Ok([pick(|t| &t.prev)?, pick(|t| &t.center)?, pick(|t| &t.next)?])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestSubject {
    pub id: String,
    pub domain: Domain,
    #[serde(default)]
    pub split: Split,
    /// Slice paths relative to the manifest, in anatomical order.
    pub slices: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shifts: Option<Vec<[f64; 2]>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub subjects: Vec<ManifestSubject>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Loads every stack of a manifest with pixels on the `[0, 1]` scale.
pub fn load_stack(manifest_path: &Path) -> Result<Vec<(ManifestSubject, SliceStack)>> {
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(manifest.subjects.len());
    for subject in manifest.subjects {
        let mut slices = Vec::with_capacity(subject.slices.len());
        for rel in &subject.slices {
            let path = root.join(rel);
            let img = read_png(&path)?;
            if let Some(first) = slices.first().map(|f: &Image| (f.height, f.width)) {
                if first != (img.height, img.width) {
                    return Err(Error::Image {
                        path,
                        msg: format!(
                            "size {}x{} differs from {}x{} of the first slice",
                            img.height, img.width, first.0, first.1
                        ),
                    });
                }
            }
            slices.push(img);
        }
        if let Some(shifts) = &subject.shifts {
            if shifts.len() != slices.len() {
                return Err(Error::Manifest {
                    path: manifest_path.to_path_buf(),
                    msg: format!("subject {}: {} shifts for {} slices", subject.id, shifts.len(), slices.len()),
                });
            }
        }
        let stack = SliceStack {
            subject: subject.id.clone(),
            domain: subject.domain,
            slices,
            shifts: subject.shifts.clone(),
        };
        out.push((subject, stack));
    }
    Ok(out)
}

/// Train and paired test stacks of both domains, preprocessed to `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train_a: Vec<SliceStack>,
    pub train_b: Vec<SliceStack>,
    pub test_a: Vec<SliceStack>,
    pub test_b: Vec<SliceStack>,
}

impl From<Phantom> for Dataset {
    fn from(p: Phantom) -> Self {
        Dataset {
            train_a: p.train_a,
            train_b: p.train_b,
            test_a: p.test_a,
            test_b: p.test_b,
        }
    }
}

/// Loads a manifest and preprocesses every slice to `size x size` on `[-1, 1]`.
/// Shifts are rescaled with the image.
pub fn load_dataset(manifest_path: &Path, size: usize) -> Result<Dataset> {
    let mut ds = Dataset {
        train_a: Vec::new(),
        train_b: Vec::new(),
        test_a: Vec::new(),
        test_b: Vec::new(),
    };
    for (subject, mut stack) in load_stack(manifest_path)? {
        let native = stack.slices.first().map(|s| s.width).unwrap_or(size);
        stack.slices = stack.slices.iter().map(|s| preprocess(s, size)).collect();
        if let Some(shifts) = stack.shifts.as_mut() {
            let f = size as f64 / native as f64;
            for s in shifts.iter_mut() {
                *s = [s[0] * f, s[1] * f];
            }
        }
        let bucket = match (subject.split, subject.domain) {
            (Split::Train, Domain::A) => &mut ds.train_a,
            (Split::Train, Domain::B) => &mut ds.train_b,
            (Split::Test, Domain::A) => &mut ds.test_a,
            (Split::Test, Domain::B) => &mut ds.test_b,
        };
        bucket.push(stack);
    }
    Ok(ds)
}

fn split_dir(split: Split, domain: Domain) -> &'static str {
    match (split, domain) {
        (Split::Train, Domain::A) => "trainA",
        (Split::Train, Domain::B) => "trainB",
        (Split::Test, Domain::A) => "testA",
        (Split::Test, Domain::B) => "testB",
    }
}

/// File name of slice `t` of a subject.
pub fn slice_file_name(subject: &str, t: usize) -> String {
    format!("{subject}_{t:02}.png")
}

/// Writes a dataset as `trainA/ trainB/ testA/ testB/` PNG folders plus
/// `manifest.json`. Paired test slices share file names across `testA` and `testB`.
pub fn write_dataset(ds: &Dataset, out: &Path) -> Result<PathBuf> {
    let mut manifest = Manifest::default();
    let groups = [
        (Split::Train, &ds.train_a),
        (Split::Train, &ds.train_b),
        (Split::Test, &ds.test_a),
        (Split::Test, &ds.test_b),
    ];
    for (split, stacks) in groups {
        for stack in stacks.iter() {
            let dir_name = split_dir(split, stack.domain);
            let dir = out.join(dir_name);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut slices = Vec::with_capacity(stack.len());
            for (t, img) in stack.slices.iter().enumerate() {
                let name = slice_file_name(&stack.subject, t);
                write_png(&dir.join(&name), &to_unit(img))?;
                slices.push(Path::new(dir_name).join(name));
            }
            manifest.subjects.push(ManifestSubject {
                id: stack.subject.clone(),
                domain: stack.domain,
                split,
                slices,
                shifts: stack.shifts.clone(),
            });
        }
    }
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
