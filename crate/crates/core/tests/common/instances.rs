// SPDX-License-Identifier: Apache-2.0

//! Random selector instances and a brute-force reference selector.
//!
//! All generated times, weights and probabilities are small dyadic
//! rationals, so every objective value is exact in f64 and ties between
//! candidates are both common and unambiguous.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sandbox_core::config::{
    AccelMode, Arch, Catalog, CatalogFile, DeviceComponent, EnvWeight, HostCaps, LaunchConfig,
    NetworkAllowList, NetworkPolicy, ObjectiveWeights, PerfEntry, PerfTable, VolumePolicy,
};

pub const ENVS: [&str; 2] = ["e0", "e1"];
const GIB: u64 = 1 << 30;

pub struct Instance {
    pub file: CatalogFile,
    pub catalog: Catalog,
    pub perf: PerfTable,
    pub host: HostCaps,
    pub weights: ObjectiveWeights,
    pub envs: Vec<EnvWeight>,
    pub allowed: Vec<NetworkPolicy>,
}

impl Instance {
    pub fn allow_list(&self) -> NetworkAllowList {
        NetworkAllowList::new(self.allowed.iter().copied())
    }
}

fn pick<T: Copy>(rng: &mut ChaCha8Rng, xs: &[T]) -> T {
    xs[rng.gen_range(0..xs.len())]
}

/// Builds an instance with at most `max_candidates` (>= 2) candidates.
pub fn instance(seed: u64, max_candidates: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_comp = rng.gen_range(1..=5);
    let components: Vec<DeviceComponent> = (0..n_comp)
        .map(|i| DeviceComponent {
            id: format!("d{i}"),
            weight: f64::from(rng.gen_range(0..=8u32)) / 4.0,
        })
        .collect();

    let n = rng.gen_range(2..=max_candidates);
    let mut candidates: BTreeMap<Arch, Vec<LaunchConfig>> = BTreeMap::new();
    let mut perf = Vec::new();
    for i in 0..n {
        let arch = match i {
            0 => Arch::X86_64,
            1 => Arch::Aarch64,
            _ => pick(&mut rng, &Arch::ALL),
        };
        let id = format!("c{:02}", rng.gen_range(0..100) * 100 + i);
        let devices = components
            .iter()
            .filter(|_| rng.gen_bool(0.5))
            .map(|c| c.id.clone())
            .collect();
        let cfg = LaunchConfig {
            id: id.clone(),
            qemu_binary: format!("qemu-system-{arch}"),
            machine_type: String::new(),
            accel: if rng.gen_bool(0.5) { AccelMode::Kvm } else { AccelMode::Tcg },
            devices,
            network: pick(&mut rng, &NetworkPolicy::ALL),
            volume: if rng.gen_bool(0.5) { VolumePolicy::None } else { VolumePolicy::ReadOnly },
            display: "vnc".into(),
            target_arch: arch,
            vcpus: rng.gen_range(1..=8),
            mem_bytes: rng.gen_range(1..=8) * GIB,
        };
        for env in ENVS {
            let k = rng.gen_range(1..=2);
            perf.push(PerfEntry {
                config: id.clone(),
                env: env.into(),
                tti_seconds: f64::from(rng.gen_range(1..=8u32)),
                boot_seconds: (0..k).map(|_| f64::from(rng.gen_range(1..=8u32))).collect(),
            });
        }
        candidates.entry(arch).or_default().push(cfg);
    }
    let file = CatalogFile {
        components,
        candidates,
        perf,
    };
    let (catalog, perf) = file.clone().into_parts().expect("generated catalog is valid");

    let host = HostCaps {
        arch: pick(&mut rng, &Arch::ALL),
        accel_available: rng.gen_bool(0.5),
        cpu_limit: rng.gen_range(1..=8),
        mem_limit: rng.gen_range(1..=8) * GIB,
    };
    let mut w = [0u32; 3].map(|_| rng.gen_range(0..=3u32));
    if w == [0, 0, 0] {
        w[0] = 1;
    }
    let weights = ObjectiveWeights::new(f64::from(w[0]), f64::from(w[1]), f64::from(w[2])).unwrap();
    let p = f64::from(rng.gen_range(0..=4u32)) / 4.0;
    let envs = vec![EnvWeight::new(ENVS[0], p), EnvWeight::new(ENVS[1], 1.0 - p)];
    let mut allowed: Vec<NetworkPolicy> =
        NetworkPolicy::ALL.into_iter().filter(|_| rng.gen_bool(0.7)).collect();
    if allowed.is_empty() {
        allowed.push(pick(&mut rng, &NetworkPolicy::ALL));
    }
    Instance {
        file,
        catalog,
        perf,
        host,
        weights,
        envs,
        allowed,
    }
}

/// Reference feasibility written directly from the constraint list.
pub fn reference_feasible(c: &LaunchConfig, host: &HostCaps, allowed: &[NetworkPolicy]) -> bool {
    c.target_arch == host.arch
        && (c.accel == AccelMode::Tcg || host.accel_available)
        && c.vcpus <= host.cpu_limit
        && c.mem_bytes <= host.mem_limit
        && allowed.contains(&c.network)
}

fn entry<'a>(file: &'a CatalogFile, id: &str, env: &str) -> &'a PerfEntry {
    file.perf.iter().find(|e| e.config == id && e.env == env).unwrap()
}

fn surface(file: &CatalogFile, c: &LaunchConfig) -> f64 {
    c.devices
        .iter()
        .map(|d| file.components.iter().find(|k| &k.id == d).unwrap().weight)
        .sum()
}

/// Exhaustive argmin of (objective, surface, id) over every candidate in
/// the file, or `None` when nothing is feasible.
pub fn brute_force(inst: &Instance, envs: &[(&str, f64)], accel_only: Option<AccelMode>) -> Option<String> {
    let w = inst.weights;
    let mut rows: Vec<(f64, f64, String)> = inst
        .file
        .candidates
        .values()
        .flatten()
        .filter(|c| reference_feasible(c, &inst.host, &inst.allowed))
        .filter(|c| accel_only.is_none_or(|a| c.accel == a))
        .map(|c| {
            let s = surface(&inst.file, c);
            let tti: f64 = envs.iter().map(|(e, p)| p * entry(&inst.file, &c.id, e).tti_seconds).sum();
            let means: Vec<(f64, f64)> = envs
                .iter()
                .map(|(e, p)| {
                    let b = &entry(&inst.file, &c.id, e).boot_seconds;
                    (*p, b.iter().sum::<f64>() / b.len() as f64)
                })
                .collect();
            let mu: f64 = means.iter().map(|(p, m)| p * m).sum();
            let var: f64 = means.iter().map(|(p, m)| p * (m - mu) * (m - mu)).sum();
            let var_term = if w.w_variance > 0.0 { w.w_variance * var } else { 0.0 };
            (w.w_latency * tti + w.w_surface * s + var_term, s, c.id.clone())
        })
        .collect();
    rows.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.partial_cmp(&b.1).unwrap())
            .then_with(|| a.2.cmp(&b.2))
    });
    rows.into_iter().next().map(|r| r.2)
}
