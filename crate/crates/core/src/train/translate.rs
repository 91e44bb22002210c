use std::fs;
use std::path::Path;

use crate::data::{images_to_tensor, preprocess, read_png, tensor_to_images, to_unit, write_png};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real};
use crate::train::checkpoint::Checkpoint;
use crate::train::config::{sidecar_path, TrainConfig};
use crate::train::models::{Direction, Models};

/// Networks restored from a checkpoint and its sidecar configuration.
pub fn load_models<T: Real>(checkpoint: &Path) -> Result<(TrainConfig, Models<T>)> {
    let config = TrainConfig::load(&sidecar_path(checkpoint))?;
    let mut models = Models::build(&config)?;
    models.load_from(&Checkpoint::load(checkpoint)?)?;
    Ok((config, models))
}

fn translate_typed<T: Real>(checkpoint: &Path, input: &Path, dir: Direction, out: &Path) -> Result<usize> {
    let (config, models) = load_models::<T>(checkpoint)?;
    let mut names: Vec<String> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
        .collect();
    names.sort();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for name in &names {
        let img = preprocess(&read_png(&input.join(name))?, config.image_size);
        let x = images_to_tensor::<T>(&[&img])?;
        let y = tensor_to_images(&models.gens.translate(&x, dir)?)?.remove(0);
        write_png(&out.join(name), &to_unit(&y))?;
    }
    Ok(names.len())
}

/// Translates every PNG in `input` and writes same-named PNGs to `out`.
/// Returns the number of images written.
pub fn translate_dir(checkpoint: &Path, input: &Path, dir: Direction, out: &Path) -> Result<usize> {
    if !checkpoint.is_file() {
        return Err(Error::invalid(format!("checkpoint {} not found", checkpoint.display())));
    }
    if !input.is_dir() {
        return Err(Error::invalid(format!("input directory {} not found", input.display())));
    }
    let config = TrainConfig::load(&sidecar_path(checkpoint))?;
    match config.precision {
        DType::F32 => translate_typed::<f32>(checkpoint, input, dir, out),
        DType::F64 => translate_typed::<f64>(checkpoint, input, dir, out),
    }
}
