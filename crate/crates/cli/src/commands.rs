use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;

use dtikit::dge::{dge_forward, embed_bvecs, smoke_refine, write_records, DgeParams, FeatureMap, Record};
use dtikit::evaluate::evaluate_tensors;
use dtikit::geometry::gradient_check;
use dtikit::gradscheme::SubsetSelection;
use dtikit::tensorfit::scalar_maps;
use dtikit::volumeio::write_phantom_dir;
use dtikit::{
    fit_volume, geo_loss, kennard_stone_select, read_nifti, synth_phantom, write_nifti, DataType, DiffusionTensor,
    Error, GradientScheme, LossWeights, Mask, PhantomKind, TensorVolume, Volume,
};

use crate::{check_outputs, Failure, GlobalOpts, Summary};

type CmdResult = Result<Summary, Failure>;

fn read_text(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::MissingInput { path: path.to_path_buf(), source })
}

fn read_scheme(bvecs: &Path, bvals: &Path) -> Result<GradientScheme, Error> {
    GradientScheme::parse_fsl(&read_text(bvecs)?, &read_text(bvals)?)
}

fn read_tensor(path: &Path) -> Result<TensorVolume, Error> {
    read_nifti(path)?.to_tensor_volume()
}

fn read_mask(path: Option<&PathBuf>, dims: [usize; 3]) -> Result<Mask, Error> {
    match path {
        None => Ok(Mask::full(dims)),
        Some(p) => {
            let v = read_nifti(p)?;
            v.check_spatial(dims, "mask")?;
            Ok(v.to_mask())
        }
    }
}

fn write_tensor(t: &TensorVolume, path: &Path) -> Result<(), Error> {
    write_nifti(&Volume::from_tensor_volume(t), path, DataType::Float64)
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Args, Debug)]
pub struct WeightArgs {
    /// Weight of the coefficient L1 term.
    #[arg(long, default_value_t = LossWeights::default().alpha)]
    pub alpha: f64,
    /// Weight of the second-invariant L1 term.
    #[arg(long, default_value_t = LossWeights::default().beta)]
    pub beta: f64,
    /// Weight of the FA L1 term.
    #[arg(long, default_value_t = LossWeights::default().gamma)]
    pub gamma: f64,
}

impl WeightArgs {
    fn weights(&self) -> Result<LossWeights, Error> {
        let w = LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// 4D diffusion-weighted series (.nii or .nii.gz).
    #[arg(long)]
    pub dwi: PathBuf,
    #[arg(long)]
    pub bvecs: PathBuf,
    #[arg(long)]
    pub bvals: PathBuf,
    /// Voxels to fit; all voxels when omitted.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Index file written by `subsample`: fit only those directions (plus every b0).
    #[arg(long)]
    pub select: Option<PathBuf>,
    /// Output 6-component tensor volume.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn fit(g: &GlobalOpts, a: FitArgs) -> CmdResult {
    check_outputs(g, &[&a.out])?;
    let mut scheme = read_scheme(&a.bvecs, &a.bvals)?;
    let mut dwi = read_nifti(&a.dwi)?;
    if dwi.n_volumes() != scheme.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} volumes in {} but {} gradient entries",
            dwi.n_volumes(),
            a.dwi.display(),
            scheme.len()
        ))
        .into());
    }
    let mask = read_mask(a.mask.as_ref(), dwi.spatial_dims())?;
    if let Some(sel_path) = &a.select {
        let sel = SubsetSelection::parse_index_file(&read_text(sel_path)?)?;
        let keep = scheme.subset_indices(&sel.indices)?;
        dwi = dwi.select_volumes(&keep)?;
        scheme = scheme.subset(&sel.indices)?;
    }
    let tensors = fit_volume(&dwi, &scheme, &mask)?;
    write_tensor(&tensors, &a.out)?;
    Ok(Summary {
        lines: vec![
            format!("fitted {} voxels with {} gradient entries", mask.count(), scheme.len()),
            format!("invalid voxels: {}", tensors.invalid_voxels),
            format!("wrote {}", a.out.display()),
        ],
        json: json!({
            "out": path_str(&a.out),
            "fitted_voxels": mask.count(),
            "entries": scheme.len(),
            "invalid_voxels": tensors.invalid_voxels,
        }),
    })
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// 6-component tensor volume.
    #[arg(long)]
    pub tensor: PathBuf,
    /// Maps are written to `<prefix>FA.nii.gz`, `<prefix>MD.nii.gz`, ...
    #[arg(long)]
    pub out_prefix: String,
}

pub fn metrics(g: &GlobalOpts, a: MetricsArgs) -> CmdResult {
    let names = ["FA", "MD", "AD", "RD"];
    let outs: Vec<PathBuf> = names.iter().map(|n| PathBuf::from(format!("{}{n}.nii.gz", a.out_prefix))).collect();
    check_outputs(g, &outs.iter().collect::<Vec<_>>())?;
    let t = read_tensor(&a.tensor)?;
    let maps = scalar_maps(&t);
    let mut lines = Vec::new();
    let mut written = serde_json::Map::new();
    for (name, out) in names.iter().zip(&outs) {
        let data = maps.get(&name.to_lowercase()).expect("known metric").to_vec();
        let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
        let vol = Volume::scalar(t.dims, data)?.with_geometry_of(&t.spacing, t.affine);
        write_nifti(&vol, out, DataType::Float64)?;
        lines.push(format!("{name}: [{lo:.6e}, {hi:.6e}] -> {}", out.display()));
        written.insert(name.to_string(), json!({ "path": path_str(out), "min": lo, "max": hi }));
    }
    Ok(Summary { lines, json: serde_json::Value::Object(written) })
}

#[derive(Args, Debug)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub bvecs: PathBuf,
    #[arg(long)]
    pub bvals: PathBuf,
    /// Number of diffusion-weighted directions to keep.
    #[arg(short, long, default_value_t = 6)]
    pub k: usize,
    /// Receives `indices.txt`, `bvecs` and `bvals` for the subset.
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn subsample(g: &GlobalOpts, a: SubsampleArgs) -> CmdResult {
    let outs = ["indices.txt", "bvecs", "bvals"].map(|n| a.out_dir.join(n));
    check_outputs(g, &outs.iter().collect::<Vec<_>>())?;
    let scheme = read_scheme(&a.bvecs, &a.bvals)?;
    let sel = kennard_stone_select(&scheme, a.k)?;
    let (bvecs, bvals) = scheme.subset(&sel.indices)?.to_fsl();
    fs::create_dir_all(&a.out_dir)?;
    fs::write(&outs[0], sel.to_index_file())?;
    fs::write(&outs[1], bvecs)?;
    fs::write(&outs[2], bvals)?;
    Ok(Summary {
        lines: vec![
            format!("selected {} of {} directions", a.k, scheme.dwi_indices().len()),
            format!("indices: {:?}", sel.indices),
            format!("spread: {:.6} rad ({:.3} deg)", sel.spread, sel.spread.to_degrees()),
        ],
        json: json!({ "indices": sel.indices, "spread": sel.spread, "out_dir": path_str(&a.out_dir) }),
    })
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predicted tensor volume.
    #[arg(long)]
    pub pred: PathBuf,
    /// Reference tensor volume.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Directory of tract masks; each `<name>.nii[.gz]` becomes a tract.
    #[arg(long)]
    pub tracts: Option<PathBuf>,
    /// Full report as JSON.
    #[arg(long)]
    pub report: PathBuf,
    /// Flat CSV of the same report.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Per-tract `name,value` table for bar charts.
    #[arg(long)]
    pub bars: Option<PathBuf>,
}

fn read_tracts(dir: &Path) -> Result<Vec<(String, Mask)>, Error> {
    let entries = fs::read_dir(dir).map_err(|source| Error::MissingInput { path: dir.to_path_buf(), source })?;
    let mut files: Vec<(String, PathBuf)> = Vec::new();
    for e in entries {
        let path = e?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let stem = name.strip_suffix(".nii.gz").or_else(|| name.strip_suffix(".nii"));
        if let Some(stem) = stem {
            files.push((stem.to_string(), path.clone()));
        }
    }
    files.sort();
    files.into_iter().map(|(name, p)| Ok((name, read_nifti(&p)?.to_mask()))).collect()
}

pub fn evaluate(g: &GlobalOpts, a: EvaluateArgs) -> CmdResult {
    let mut outs = vec![&a.report];
    outs.extend(a.csv.iter());
    outs.extend(a.bars.iter());
    check_outputs(g, &outs)?;
    let pred = read_tensor(&a.pred)?;
    let gt = read_tensor(&a.gt)?;
    pred.check_same_grid(&gt)?;
    let mask = read_mask(a.mask.as_ref(), pred.dims)?;
    let tracts = match &a.tracts {
        Some(dir) => read_tracts(dir)?,
        None => Vec::new(),
    };
    let report = evaluate_tensors(&pred, &gt, &mask, &tracts)?;
    fs::write(&a.report, report.to_json())?;
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv())?;
    }
    if let Some(p) = &a.bars {
        fs::write(p, report.tract_bars())?;
    }
    let mut lines: Vec<String> = report
        .mae
        .entries()
        .iter()
        .zip(report.ssim.entries())
        .map(|((name, m), (_, s))| format!("{name:>3}: MAE {:.6e} ± {:.6e}  SSIM {s:.6}", m.mean, m.std))
        .collect();
    for (name, v) in &report.tracts {
        lines.push(match v {
            Some(v) => format!("tract {name}: FA MAE {v:.6}"),
            None => format!("tract {name}: absent (empty mask)"),
        });
    }
    let json = serde_json::from_str(&report.to_json()).expect("report serializes to JSON");
    Ok(Summary { lines, json })
}

#[derive(Args, Debug)]
pub struct LossArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[command(flatten)]
    pub weights: WeightArgs,
    /// Write ∂L/∂pred as a 6-component volume.
    #[arg(long)]
    pub grad_out: Option<PathBuf>,
    /// Compare the analytic gradient with central differences (small volumes only).
    #[arg(long)]
    pub gradcheck: bool,
    /// Coefficient step for --gradcheck, mm²/s.
    #[arg(long, default_value_t = 1e-7)]
    pub fd_step: f64,
}

/// Largest tolerated relative error for `loss --gradcheck`.
const GRADCHECK_LIMIT: f64 = 1e-4;

pub fn loss(g: &GlobalOpts, a: LossArgs) -> CmdResult {
    check_outputs(g, &a.grad_out.iter().collect::<Vec<_>>())?;
    let w = a.weights.weights()?;
    let pred = read_tensor(&a.pred)?;
    let gt = read_tensor(&a.gt)?;
    pred.check_same_grid(&gt)?;
    let mask = read_mask(a.mask.as_ref(), pred.dims)?;
    let report = geo_loss(&pred, &gt, &mask, &w)?;
    if let Some(p) = &a.grad_out {
        let mut gv = TensorVolume::new(pred.dims, report.grad.iter().map(|c| DiffusionTensor(*c)).collect())?;
        gv.spacing = pred.spacing;
        gv.affine = pred.affine;
        write_tensor(&gv, p)?;
    }
    let mut json: serde_json::Value = serde_json::from_str(&report.to_json()).expect("report serializes to JSON");
    let mut lines = vec![report.to_json()];
    if a.gradcheck {
        if !(a.fd_step > 0.0 && a.fd_step.is_finite()) {
            return Err(Error::InvalidArgument(format!("--fd-step must be positive, got {}", a.fd_step)).into());
        }
        let worst = gradient_check(&pred, &gt, &mask, &w, a.fd_step)?;
        json["gradcheck_max_rel_error"] = json!(worst);
        if worst > GRADCHECK_LIMIT {
            return Err(Failure::GradientCheck { worst, limit: GRADCHECK_LIMIT });
        }
        lines.push(format!("gradient check: max relative error {worst:.3e}"));
    }
    Ok(Summary { lines, json })
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// isotropic, crossing or gradient-fa.
    #[arg(long, default_value = "gradient-fa")]
    pub kind: String,
    /// Grid extents, each at least 4.
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 8, 8])]
    pub dims: Vec<usize>,
    /// Rician noise level S0/σ; noiseless when omitted.
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

pub fn synth(g: &GlobalOpts, a: SynthArgs) -> CmdResult {
    let kind: PhantomKind = a.kind.parse()?;
    let dims: [usize; 3] = a
        .dims
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidArgument(format!("--dims needs three extents, got {:?}", a.dims)))?;
    let outs = ["dwi.nii.gz", "bvecs", "bvals", "tensor.nii.gz", "mask.nii.gz"].map(|n| a.out_dir.join(n));
    check_outputs(g, &outs.iter().collect::<Vec<_>>())?;
    let ph = synth_phantom(dims, kind, g.seed, a.snr)?;
    write_phantom_dir(&ph, &a.out_dir)?;
    Ok(Summary {
        lines: vec![
            format!("{} phantom {:?}, {} volumes, seed {}", a.kind, dims, ph.scheme.len(), g.seed),
            format!("wrote {}", a.out_dir.display()),
        ],
        json: json!({
            "kind": a.kind,
            "dims": dims,
            "volumes": ph.scheme.len(),
            "snr": a.snr,
            "seed": g.seed,
            "files": outs.iter().map(|p| path_str(p)).collect::<Vec<_>>(),
        }),
    })
}

#[derive(Args, Debug)]
pub struct DgeDemoArgs {
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    /// Spatial extents W,H,D (each at least 3).
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 8, 8])]
    pub size: Vec<usize>,
    /// Also write parameters, inputs and outputs as DGE1 records.
    #[arg(long)]
    pub golden_out: Option<PathBuf>,
}

pub fn dge_demo(g: &GlobalOpts, a: DgeDemoArgs) -> CmdResult {
    check_outputs(g, &a.golden_out.iter().collect::<Vec<_>>())?;
    let [w, h, d]: [usize; 3] = a
        .size
        .as_slice()
        .try_into()
        .map_err(|_| Error::InvalidArgument(format!("--size needs three extents, got {:?}", a.size)))?;
    if a.batch == 0 {
        return Err(Error::InvalidArgument("--batch must be at least 1".into()).into());
    }
    let p = DgeParams::seeded(a.channels, g.seed)?;
    let shape = [a.batch, a.channels, w, h, d];
    let x = FeatureMap::random(shape, g.seed.wrapping_add(1))?;
    let schemes = vec![GradientScheme::canonical_six(1000.0); a.batch];
    let e = embed_bvecs(&schemes, &p)?;
    let (xo, eo) = dge_forward(&x, &e, &p)?;
    if let Some(path) = &a.golden_out {
        let mut records = p.to_records();
        records.push(Record { dims: shape.to_vec(), data: x.data.clone() });
        records.push(Record { dims: vec![e.batch, e.channels], data: e.data.clone() });
        records.push(Record { dims: xo.shape.to_vec(), data: xo.data.clone() });
        records.push(Record { dims: vec![eo.batch, eo.channels], data: eo.data.clone() });
        write_records(path, &records)?;
    }
    let fmt = |s: &[usize]| format!("({})", s.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(", "));
    Ok(Summary {
        lines: vec![
            format!("X {} -> X' {}", fmt(&x.shape), fmt(&xo.shape)),
            format!("E {} -> E' {}", fmt(&[e.batch, e.channels]), fmt(&[eo.batch, eo.channels])),
            format!("E' = {:?}", eo.data),
        ],
        json: json!({
            "x_shape": x.shape,
            "x_out_shape": xo.shape,
            "e_shape": [e.batch, e.channels],
            "e_out_shape": [eo.batch, eo.channels],
            "e_out": eo.data,
            "seed": g.seed,
        }),
    })
}

#[derive(Args, Debug)]
pub struct RefineArgs {
    /// Starting tensor field.
    #[arg(long)]
    pub init: PathBuf,
    /// Target tensor field.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub mask: Option<PathBuf>,
    #[command(flatten)]
    pub weights: WeightArgs,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Initial step size on the coefficients.
    #[arg(long, default_value_t = 1e-7)]
    pub lr: f64,
    /// Refined tensor field.
    #[arg(long)]
    pub out: PathBuf,
    /// Loss trajectory as `step,l_geo` CSV.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
}

pub fn refine(g: &GlobalOpts, a: RefineArgs) -> CmdResult {
    let mut outs = vec![&a.out];
    outs.extend(a.trajectory.iter());
    check_outputs(g, &outs)?;
    let w = a.weights.weights()?;
    let init = read_tensor(&a.init)?;
    let gt = read_tensor(&a.gt)?;
    init.check_same_grid(&gt)?;
    let mask = read_mask(a.mask.as_ref(), init.dims)?;
    let out = smoke_refine(&init, &gt, &mask, &w, a.steps, a.lr)?;
    write_tensor(&out.field, &a.out)?;
    if let Some(p) = &a.trajectory {
        fs::write(p, out.trajectory_csv())?;
    }
    let first = out.trajectory[0];
    let last = *out.trajectory.last().expect("trajectory holds the initial loss");
    let taken = out.trajectory.len() - 1;
    Ok(Summary {
        lines: vec![
            format!("L_Geo {first:.6e} -> {last:.6e} in {taken} steps"),
            format!("final step size {:.3e}{}", out.final_lr, if out.stalled { " (line search stalled)" } else { "" }),
            format!("wrote {}", a.out.display()),
        ],
        json: json!({
            "initial": first,
            "final": last,
            "steps": taken,
            "final_lr": out.final_lr,
            "stalled": out.stalled,
            "out": path_str(&a.out),
        }),
    })
}
