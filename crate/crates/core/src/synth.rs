//! Synthetic labelled soundscapes built from short tone motifs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{synth_clip, AudioClip, Tone};
use crate::error::Result;

/// A repeating pattern of `(offset, duration, frequency)` tones.
#[derive(Debug, Clone, PartialEq)]
pub struct Motif {
    pub name: String,
    pub notes: Vec<(f64, f64, f64)>,
}

impl Motif {
    pub fn span(&self) -> f64 {
        self.notes.iter().map(|(o, d, _)| o + d).fold(0.0, f64::max)
    }
}

/// Three motifs with disjoint pitch ranges and rhythms.
pub fn default_motifs() -> Vec<Motif> {
    vec![
        Motif {
            name: "whistle".into(),
            notes: vec![(0.0, 0.5, 2000.0), (0.5, 0.5, 2600.0)],
        },
        Motif {
            name: "trill".into(),
            notes: (0..6).map(|i| (i as f64 * 0.25, 0.25, if i % 2 == 0 { 5200.0 } else { 6400.0 })).collect(),
        },
        Motif {
            name: "hoot".into(),
            notes: vec![(0.0, 0.75, 600.0), (0.9, 0.75, 450.0)],
        },
    ]
}

#[derive(Debug, Clone)]
pub struct LabelledClip {
    pub clip: AudioClip,
    pub label: String,
}

/// `per_class` clips of `seconds` for every motif. Each clip is cut into 2 s
/// slots; a slot holds one jittered motif instance with probability 0.7
/// (at least one per clip). Noise is uniform with the given level.
pub fn motif_corpus(
    motifs: &[Motif],
    per_class: usize,
    seconds: f64,
    noise_level: f64,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<LabelledClip>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slot = 2.0;
    let n_slots = (seconds / slot).floor().max(1.0) as usize;
    let mut out = Vec::with_capacity(per_class * motifs.len());
    for i in 0..per_class {
        for motif in motifs {
            let mut tones = Vec::new();
            let forced = rng.random_range(0..n_slots);
            for s in 0..n_slots {
                if s != forced && !rng.random_bool(0.7) {
                    continue;
                }
                let room = (slot - motif.span()).max(0.0);
                let start = s as f64 * slot + rng.random_range(0.0..=room);
                let pitch = rng.random_range(0.95..1.05);
                let amplitude = rng.random_range(0.15..0.35);
                for &(o, d, f) in &motif.notes {
                    let t0 = start + o;
                    if t0 + d <= seconds {
                        tones.push(Tone {
                            start: t0,
                            duration: d,
                            frequency: f * pitch,
                            amplitude,
                        });
                    }
                }
            }
            let id = format!("{}-{i:03}", motif.name);
            let clip = synth_clip(&id, &tones, noise_level, sample_rate, seconds, rng.random())?;
            out.push(LabelledClip {
                clip,
                label: motif.name.clone(),
            });
        }
    }
    Ok(out)
}
