//! Python bindings. Tensors cross the boundary as flat lists plus a shape.

use maskflow::dit::{DiT, DiTConfig};
use maskflow::edit::{EditConfig, EditModels, MaskSource, Strategy};
use maskflow::metrics::{self, ImagePair};
use maskflow::pasl::{complexity_report, PaslConfig, PaslMode};
use maskflow::{Tensor, VERSION};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn image(data: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(err)
}

fn mask(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor<f64>> {
    Tensor::new(shape, data).map_err(err)
}

#[pyfunction]
fn version() -> &'static str {
    VERSION
}

/// Synthetic portrait: `image` is `[3, size, size]` flattened, `regions`
/// maps each region name to a flattened `[size, size]` mask.
#[pyfunction]
fn render_portrait<'py>(py: Python<'py>, seed: u64, size: usize) -> PyResult<Bound<'py, PyDict>> {
    let p = maskflow::synth::render_portrait(seed, size).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("shape", p.image.dims().to_vec())?;
    d.set_item("image", p.image.data().to_vec())?;
    let regions = PyDict::new(py);
    for (k, v) in &p.regions {
        regions.set_item(k, v.data().to_vec())?;
    }
    d.set_item("regions", regions)?;
    d.set_item("attributes", p.attributes.clone())?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (source, edited, shape, region = None))]
fn psnr(source: Vec<f32>, edited: Vec<f32>, shape: Vec<usize>, region: Option<Vec<f64>>) -> PyResult<f64> {
    let (a, b) = (image(source, shape.clone())?, image(edited, shape.clone())?);
    let region = match region {
        Some(r) => Some(mask(r, shape[1..].to_vec())?),
        None => None,
    };
    metrics::psnr(ImagePair::new(&a, &b).map_err(err)?, region.as_ref()).map_err(err)
}

#[pyfunction]
fn ssim(source: Vec<f32>, edited: Vec<f32>, shape: Vec<usize>) -> PyResult<f64> {
    let (a, b) = (image(source, shape.clone())?, image(edited, shape)?);
    metrics::ssim(ImagePair::new(&a, &b).map_err(err)?).map_err(err)
}

/// Parameter and FLOP table of the locator as a JSON string.
#[pyfunction]
#[pyo3(signature = (mode = "paper"))]
fn complexity(mode: &str) -> PyResult<String> {
    let mode = match mode {
        "paper" => PaslMode::Paper,
        "toy" => PaslMode::Toy,
        other => return Err(err(format!("unknown mode '{other}' (toy | paper)"))),
    };
    serde_json::to_string(&complexity_report(&PaslConfig::for_mode(mode))).map_err(err)
}

/// Edits an image with a pixel mask under the default toy DiT. Returns the
/// flattened edited image and the JSON report.
#[pyfunction]
#[pyo3(signature = (image_data, shape, prompt_src, prompt_tgt, mask_data, n = 30, t = 3, strategy = "s2d", seed = 0))]
#[allow(clippy::too_many_arguments)]
fn edit(
    image_data: Vec<f32>,
    shape: Vec<usize>,
    prompt_src: &str,
    prompt_tgt: &str,
    mask_data: Vec<f64>,
    n: usize,
    t: usize,
    strategy: &str,
    seed: u64,
) -> PyResult<(Vec<f32>, String)> {
    if shape.len() != 3 {
        return Err(err("shape must be [channels, height, width]"));
    }
    let img = image(image_data, shape.clone())?;
    let m = mask(mask_data, shape[1..].to_vec())?;
    let dit = DiT::new(DiTConfig { seed, ..DiTConfig::default() }).map_err(err)?;
    let cfg = EditConfig {
        n,
        t,
        strategy: Strategy::parse(strategy).map_err(err)?,
        mask_source: MaskSource::Manual,
        seed,
        ..EditConfig::default()
    };
    let models = EditModels {
        dit: &dit,
        pasl: None,
        mask: Some(m),
        mask_prompt: None,
    };
    let (out, report) = maskflow::edit::edit(&img, prompt_src, prompt_tgt, cfg, models).map_err(err)?;
    Ok((out.image.into_data(), serde_json::to_string(&report).map_err(err)?))
}

#[pymodule]
fn maskflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(render_portrait, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(complexity, m)?)?;
    m.add_function(wrap_pyfunction!(edit, m)?)?;
    Ok(())
}
