//! Text dumps of cross-attention maps and per-region attention mass.

use agedit_core::autodiff::Tape;
use agedit_core::diffusion::{forward_diffuse, DiffusionSchedule};
use agedit_core::eval::{attention_maps, edit_bundle, paired_t, AttentionMap, AttentionMass, EditSource};
use agedit_core::model::Denoiser;
use agedit_core::rng;
use agedit_core::synthface::{render_face, AgeCodebook, SyntheticFaceSpec};
use agedit_core::Tensor;

use crate::error::AppResult;

/// Capture every branch's attention map for each spec's render noised to `t`.
pub fn capture_maps(
    model: &Denoiser<f32>,
    codebook: &AgeCodebook,
    specs: &[SyntheticFaceSpec],
    sched: &DiffusionSchedule,
    t: usize,
    seed: u64,
) -> AppResult<Vec<AttentionMap>> {
    let mut latents = Vec::new();
    let mut bundles = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let img = render_face::<f32>(s)?;
        let eps = rng::normal_tensor(&mut rng::stream(rng::derive(seed, &[0xA77, i as u64])), img.shape());
        latents.push(forward_diffuse(&img, t, &eps, sched)?);
        bundles.push(edit_bundle(&EditSource::Spec(s.clone()), s.age, codebook, None)?);
    }
    let mut tape = Tape::new();
    let bind = model.params.bind(&mut tape, false);
    let z = tape.constant(Tensor::stack(&latents)?);
    let pass = model.forward_capture(&mut tape, &bind, z, &vec![t; specs.len()], &bundles)?;
    Ok(attention_maps(&tape, &pass)?)
}

/// One block per map: a header line, then one line per image token.
pub fn format_maps(maps: &[AttentionMap]) -> String {
    let mut s = String::new();
    for m in maps {
        s.push_str(&format!(
            "# sample {} block {} branch {} t {} ({}x{})\n",
            m.sample,
            m.block,
            m.branch.name(),
            m.timestep,
            m.rows,
            m.cols
        ));
        for r in 0..m.rows {
            let row: Vec<String> = m.weights[r * m.cols..(r + 1) * m.cols].iter().map(|w| format!("{w:.5}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
    }
    s
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Summary of the two decoupling comparisons with paired t statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MassSummary {
    pub n: usize,
    pub age_on_age: f64,
    pub id_on_age: f64,
    pub t_age_regions: f64,
    pub id_on_face: f64,
    pub age_on_face: f64,
    pub t_face: f64,
}

pub fn summarize_mass(mass: &[AttentionMass]) -> MassSummary {
    let col = |f: fn(&AttentionMass) -> f64| mass.iter().map(f).collect::<Vec<_>>();
    let (aa, ia, idf, af) = (
        col(|m| m.age_on_age_regions),
        col(|m| m.id_on_age_regions),
        col(|m| m.id_on_face),
        col(|m| m.age_on_face),
    );
    MassSummary {
        n: mass.len(),
        age_on_age: mean(&aa),
        id_on_age: mean(&ia),
        t_age_regions: paired_t(&aa, &ia),
        id_on_face: mean(&idf),
        age_on_face: mean(&af),
        t_face: paired_t(&idf, &af),
    }
}

/// Tab-separated per-image mass table followed by the summary as comments.
pub fn format_mass(mass: &[AttentionMass]) -> String {
    let mut s = String::from("image\tage_on_age_regions\tid_on_age_regions\tage_on_face\tid_on_face\n");
    for (i, m) in mass.iter().enumerate() {
        s.push_str(&format!(
            "{i}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            m.age_on_age_regions, m.id_on_age_regions, m.age_on_face, m.id_on_face
        ));
    }
    let t = summarize_mass(mass);
    s.push_str(&format!(
        "# age regions: age {:.4} vs id {:.4}, paired t = {:.2}\n# face oval: id {:.4} vs age {:.4}, paired t = {:.2}\n",
        t.age_on_age, t.id_on_age, t.t_age_regions, t.id_on_face, t.age_on_face, t.t_face
    ));
    s
}
