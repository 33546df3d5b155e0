use std::collections::BTreeMap;

use netpg_core::collector::{
    energy_report, integrate_energy, read_report_csv, write_report_csv, NodeSeries, SeriesMap, SeriesPoint,
};
use netpg_core::wire::TelemetrySample;
use proptest::prelude::*;

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

/// Midpoint Riemann sum of the piecewise-linear power interpolant, `k`
/// sub-intervals per sample gap.
fn midpoint_oracle(s: &[SeriesPoint], k: u32) -> f64 {
    let mut total = 0.0;
    for w in s.windows(2) {
        let (t0, t1) = (w[0].timestamp_us as f64 * 1e-6, w[1].timestamp_us as f64 * 1e-6);
        let (p0, p1) = (w[0].power_w(), w[1].power_w());
        let h = (t1 - t0) / f64::from(k);
        for i in 0..k {
            let frac = (f64::from(i) + 0.5) / f64::from(k);
            total += (p0 + (p1 - p0) * frac) * h;
        }
    }
    total
}

fn series() -> impl Strategy<Value = Vec<SeriesPoint>> {
    prop::collection::vec((1u64..200_000, 0i32..3_000_000, 4_500u16..5_500), 2..300).prop_map(|v| {
        let mut t = 0;
        v.into_iter()
            .map(|(dt, current_ua, bus_mv)| {
                t += dt;
                SeriesPoint { timestamp_us: t, current_ua, bus_mv }
            })
            .collect()
    })
}

proptest! {
    #[test]
    fn agrees_with_fine_riemann(s in series()) {
        let e = integrate_energy(&s).energy_j;
        prop_assert!(rel(e, midpoint_oracle(&s, 100)) <= 1e-9, "{} vs oracle", e);
    }

    /// Current ramps linearly in time at constant voltage, so power is linear.
    #[test]
    fn linear_ramp_is_exact(
        i0 in 0i32..1_000_000,
        slope in 0i32..200,
        step_us in prop::sample::select(vec![1_000u64, 10_000, 100_000]),
        n in 2usize..500,
    ) {
        let s: Vec<SeriesPoint> = (0..n)
            .map(|k| SeriesPoint {
                timestamp_us: k as u64 * step_us,
                current_ua: i0 + slope * k as i32,
                bus_mv: 5_000,
            })
            .collect();
        let t_end = (n - 1) as f64 * step_us as f64 * 1e-6;
        let i_end = f64::from(i0) + f64::from(slope) * (n - 1) as f64;
        let exact = 5.0 * 1e-6 * (f64::from(i0) + i_end) / 2.0 * t_end;
        prop_assert!(rel(integrate_energy(&s).energy_j, exact) <= 1e-12);
    }

    /// Inserting points that lie on the interpolant does not change energy.
    /// Constant voltage keeps power linear between the original points.
    #[test]
    fn refinement_leaves_energy_unchanged(s in series()) {
        let s: Vec<SeriesPoint> = s.into_iter().map(|p| SeriesPoint { bus_mv: 5_000, ..p }).collect();
        let mut fine = Vec::new();
        for w in s.windows(2) {
            fine.push(w[0]);
            let (a, b) = (w[0], w[1]);
            let exact_mid = (a.timestamp_us + b.timestamp_us) % 2 == 0 && (b.current_ua - a.current_ua) % 2 == 0;
            if exact_mid && b.timestamp_us - a.timestamp_us >= 2 {
                fine.push(SeriesPoint {
                    timestamp_us: (a.timestamp_us + b.timestamp_us) / 2,
                    current_ua: (a.current_ua + b.current_ua) / 2,
                    bus_mv: 5_000,
                });
            }
        }
        fine.push(*s.last().unwrap());
        let coarse = integrate_energy(&s).energy_j;
        prop_assert!(rel(coarse, integrate_energy(&fine).energy_j) <= 1e-9);
    }

    #[test]
    fn report_total_is_sum_and_csv_round_trips(all in prop::collection::vec(series(), 1..6)) {
        let mut map = SeriesMap::new();
        for (i, s) in all.iter().enumerate() {
            let addr = format!("10.0.0.{}", i + 1);
            let mut ns = NodeSeries::new(&addr);
            for (seq, p) in s.iter().enumerate() {
                ns.push(&TelemetrySample {
                    node_id: i as u16,
                    seq: seq as u64,
                    timestamp_us: p.timestamp_us,
                    current_ua: p.current_ua,
                    bus_mv: p.bus_mv,
                });
            }
            map.insert(addr, ns);
        }
        let report = energy_report(&map);
        let sum: f64 = report.nodes.iter().map(|n| n.energy_j).sum();
        prop_assert!(rel(report.total_energy_j, sum) <= 1e-9);
        prop_assert!(report.nodes.iter().all(|n| n.energy_j >= 0.0));
        let mut buf = Vec::new();
        write_report_csv(&report, &mut buf).unwrap();
        let back = read_report_csv(buf.as_slice()).unwrap();
        let by_id = |r: &netpg_core::collector::EnergyReport| -> BTreeMap<u16, (f64, u64)> {
            r.nodes.iter().map(|n| (n.node_id, (n.energy_j, n.sample_count))).collect()
        };
        prop_assert_eq!(by_id(&back), by_id(&report));
    }
}

#[test]
fn fifty_joules_exactly() {
    for n in [2u64, 3, 11, 101, 1001] {
        let s: Vec<SeriesPoint> = (0..n)
            .map(|k| SeriesPoint {
                timestamp_us: k * 10_000_000 / (n - 1),
                current_ua: 1_000_000,
                bus_mv: 5_000,
            })
            .collect();
        assert_eq!(integrate_energy(&s).energy_j, 50.0, "n={n}");
    }
}
