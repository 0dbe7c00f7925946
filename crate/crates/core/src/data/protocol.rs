use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    SingleShot,
    SingleQuery,
    MultiQuery,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::SingleShot => "single_shot",
            Protocol::SingleQuery => "single_query",
            Protocol::MultiQuery => "multi_query",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single_shot" => Ok(Protocol::SingleShot),
            "single_query" | "sq" => Ok(Protocol::SingleQuery),
            "multi_query" | "mq" => Ok(Protocol::MultiQuery),
            other => Err(Error::Config(format!("unknown protocol `{other}`"))),
        }
    }
}

/// Probe and gallery lists. `query_groups[q]` lists the probe indices that
/// form query `q`; groups are singletons except under multi-query.
#[derive(Debug, Clone)]
pub struct ProbeGallery {
    pub protocol: Protocol,
    pub probes: Vec<ImageRecord>,
    pub gallery: Vec<ImageRecord>,
    pub query_groups: Vec<Vec<usize>>,
}

fn tagged(r: &ImageRecord, split: Split) -> ImageRecord {
    ImageRecord {
        split,
        ..r.clone()
    }
}

/// Splits a labelled dataset into probe and gallery sets.
///
/// * single-shot: one probe and one gallery image per identity, from
///   different cameras.
/// * single-query: one probe per identity per camera; every other image is
///   gallery.
/// * multi-query: all images of an identity in one (randomly chosen) camera
///   form one query group; the rest is gallery.
pub fn make_probe_gallery(ds: &Dataset, protocol: Protocol, seed: u64) -> Result<ProbeGallery> {
    if !ds.is_labelled() {
        return Err(Error::Unlabelled(ds.name.clone()));
    }
    let recs = ds.records();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // person -> camera -> record indices, all in ascending order
    let mut layout: BTreeMap<u32, BTreeMap<u32, Vec<usize>>> = BTreeMap::new();
    for (i, r) in recs.iter().enumerate() {
        layout
            .entry(r.person_id.expect("labelled"))
            .or_default()
            .entry(r.camera_id)
            .or_default()
            .push(i);
    }
    for (&person, cams) in &layout {
        if cams.len() < 2 {
            return Err(Error::SingleCameraIdentity {
                person_id: person,
                camera_id: *cams.keys().next().expect("non-empty"),
            });
        }
    }

    let mut probes = Vec::new();
    let mut gallery = Vec::new();
    let mut query_groups = Vec::new();
    match protocol {
        Protocol::SingleShot => {
            for cams in layout.values() {
                let cam_ids: Vec<u32> = cams.keys().copied().collect();
                let probe_cam = *cam_ids.choose(&mut rng).expect("two cameras");
                let probe = *cams[&probe_cam].choose(&mut rng).expect("non-empty");
                let others: Vec<u32> = cam_ids.into_iter().filter(|&c| c != probe_cam).collect();
                let gallery_cam = *others.choose(&mut rng).expect("two cameras");
                let g = *cams[&gallery_cam].choose(&mut rng).expect("non-empty");
                query_groups.push(vec![probes.len()]);
                probes.push(tagged(&recs[probe], Split::Probe));
                gallery.push(tagged(&recs[g], Split::Gallery));
            }
        }
        Protocol::SingleQuery => {
            let mut chosen = vec![false; recs.len()];
            for cams in layout.values() {
                for members in cams.values() {
                    let p = *members.choose(&mut rng).expect("non-empty");
                    chosen[p] = true;
                    query_groups.push(vec![probes.len()]);
                    probes.push(tagged(&recs[p], Split::Probe));
                }
            }
            gallery.extend(
                recs.iter()
                    .zip(&chosen)
                    .filter(|(_, &c)| !c)
                    .map(|(r, _)| tagged(r, Split::Gallery)),
            );
            // every probe needs a cross-camera gallery match
            for p in &probes {
                let matched = gallery
                    .iter()
                    .any(|g| g.person_id == p.person_id && g.camera_id != p.camera_id);
                if !matched {
                    return Err(Error::SingleCameraIdentity {
                        person_id: p.person_id.expect("labelled"),
                        camera_id: p.camera_id,
                    });
                }
            }
        }
        Protocol::MultiQuery => {
            let mut chosen = vec![false; recs.len()];
            for cams in layout.values() {
                let cam_ids: Vec<u32> = cams.keys().copied().collect();
                let probe_cam = *cam_ids.choose(&mut rng).expect("two cameras");
                let group: Vec<usize> = (probes.len()..probes.len() + cams[&probe_cam].len()).collect();
                for &i in &cams[&probe_cam] {
                    chosen[i] = true;
                    probes.push(tagged(&recs[i], Split::Probe));
                }
                query_groups.push(group);
            }
            gallery.extend(
                recs.iter()
                    .zip(&chosen)
                    .filter(|(_, &c)| !c)
                    .map(|(r, _)| tagged(r, Split::Gallery)),
            );
        }
    }
    Ok(ProbeGallery {
        protocol,
        probes,
        gallery,
        query_groups,
    })
}
