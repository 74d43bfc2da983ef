use cpdsa::data::events::{parse_csv, parse_packed};
use cpdsa::data::{
    downsample, integrate_frames, make_synthetic, read_clip, split_dataset, to_csv, to_packed, write_clip, Dataset, Event,
    EventStream, Slicing, SynthSpec, SynthTask,
};
use proptest::prelude::*;

fn stream() -> impl Strategy<Value = EventStream> {
    (1u16..12, 1u16..12).prop_flat_map(|(w, h)| {
        prop::collection::vec((0u64..5_000, 0..w, 0..h, 0u8..2), 0..300).prop_map(move |raw| {
            let mut s = EventStream::new(w, h);
            s.events = raw.into_iter().map(|(t, x, y, p)| Event { t, x, y, p }).collect();
            s.sort();
            s
        })
    })
}

fn slicing() -> impl Strategy<Value = Slicing> {
    prop_oneof![
        (1u64..3_000).prop_map(|dt_us| Slicing::FixedDuration { dt_us }),
        (1usize..12).prop_map(|slices| Slicing::FixedCount { slices }),
    ]
}

/// Slice of an event by scanning boundaries rather than dividing.
fn oracle_slice(e: &Event, t0: u64, span: u64, slicing: Slicing) -> usize {
    let rel = e.t - t0;
    let mut k = 0usize;
    match slicing {
        Slicing::FixedDuration { dt_us } => {
            while (k as u64 + 1) * dt_us <= rel {
                k += 1;
            }
        }
        Slicing::FixedCount { slices } => {
            while ((k + 1) as u128) * (span as u128 + 1) <= rel as u128 * slices as u128 {
                k += 1;
            }
        }
    }
    k
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn integration_conserves_events_per_slice(s in stream(), slicing in slicing()) {
        let clip = integrate_frames(&s, slicing).unwrap();
        let totals = clip.slice_totals();
        let mut want = vec![0.0; totals.len()];
        let mut pixels = vec![0.0; clip.frames.len()];
        let (t0, span) = s.events.first().zip(s.events.last()).map_or((0, 0), |(a, b)| (a.t, b.t - a.t));
        let plane = s.width as usize * s.height as usize;
        for e in &s.events {
            let k = oracle_slice(e, t0, span, slicing);
            prop_assert!(k < totals.len());
            want[k] += 1.0;
            pixels[(k * 2 + e.p as usize) * plane + e.y as usize * s.width as usize + e.x as usize] += 1.0;
        }
        prop_assert_eq!(&totals, &want);
        prop_assert_eq!(clip.frames.data(), &pixels[..]);
        prop_assert_eq!(clip.total(), s.events.len() as f64);
    }

    #[test]
    fn csv_and_packed_round_trip(s in stream()) {
        prop_assert_eq!(&parse_csv(&to_csv(&s), s.width, s.height).unwrap(), &s);
        prop_assert_eq!(&parse_packed(&to_packed(&s).unwrap()).unwrap(), &s);
    }

    #[test]
    fn downsampling_conserves_counts(s in stream(), th in 1usize..12, tw in 1usize..12) {
        let clip = integrate_frames(&s, Slicing::FixedCount { slices: 3 }).unwrap();
        prop_assume!(th <= s.height as usize && tw <= s.width as usize);
        let small = downsample(&clip, (th, tw)).unwrap();
        prop_assert_eq!(small.frames.shape(), &[3, 2, th, tw]);
        let (a, b) = (clip.slice_totals(), small.slice_totals());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x));
        }
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive(
        labels in prop::collection::vec(0usize..5, 1..200),
        ratio in 0.05f64..0.95,
        seed in any::<u64>(),
    ) {
        let (train, test) = split_dataset(&labels, ratio, seed).unwrap();
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        prop_assert_eq!(split_dataset(&labels, ratio, seed).unwrap(), (train, test));
    }
}

#[test]
fn block_sum_downsample_by_two() {
    let mut s = EventStream::new(4, 4);
    for (x, y) in [(0, 0), (1, 1), (2, 0), (3, 3), (3, 2)] {
        s.events.push(Event { t: 0, x, y, p: 1 });
    }
    let clip = integrate_frames(&s, Slicing::FixedCount { slices: 1 }).unwrap();
    let small = downsample(&clip, (2, 2)).unwrap();
    assert_eq!(&small.frames.data()[4..], &[2.0, 1.0, 0.0, 2.0]);
    assert_eq!(small.provenance.resample.as_deref(), Some("block-sum 4x4->2x2"));
    assert!(downsample(&clip, (8, 8)).is_err());
    assert_eq!(downsample(&clip, (4, 4)).unwrap(), clip);
}

#[test]
fn partial_last_slice_is_flagged() {
    let mut s = EventStream::new(2, 2);
    s.events = vec![Event { t: 0, x: 0, y: 0, p: 0 }, Event { t: 250, x: 1, y: 1, p: 1 }];
    let clip = integrate_frames(&s, Slicing::FixedDuration { dt_us: 100 }).unwrap();
    assert_eq!(clip.slice_totals(), vec![1.0, 0.0, 1.0]);
    assert!(clip.provenance.partial_last_slice);
    let exact = integrate_frames(&s, Slicing::FixedDuration { dt_us: 251 }).unwrap();
    assert_eq!(exact.slice_totals(), vec![2.0]);
    assert!(!exact.provenance.partial_last_slice);
}

#[test]
fn clip_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = make_synthetic(&SynthSpec::new(SynthTask::MovingBar, 4, 3, 6, 2)).unwrap();
    let path = write_clip(dir.path(), "one", &d.samples[1]).unwrap();
    assert_eq!(read_clip(&path).unwrap(), d.samples[1]);
    let sub = dir.path().join("set");
    d.save_dir(&sub).unwrap();
    assert_eq!(Dataset::load_dir(&sub, Some(3)).unwrap(), d);
}

#[test]
fn temporal_order_classes_agree_after_time_averaging() {
    for classes in [2, 3, 6] {
        let mut spec = SynthSpec::new(SynthTask::TemporalOrder, 5, classes, 12 * classes, 7);
        spec.height = 8;
        spec.width = 8;
        let d = make_synthetic(&spec).unwrap();
        let mean_of = |c: usize| {
            let members: Vec<_> = d.samples.iter().filter(|s| s.label == c).collect();
            let mut acc = vec![0.0; members[0].time_sum().len()];
            for m in &members {
                for (a, v) in acc.iter_mut().zip(m.time_sum()) {
                    *a += v;
                }
            }
            acc
        };
        let reference = mean_of(0);
        for c in 1..classes {
            assert_eq!(mean_of(c), reference, "{classes} classes, class {c}");
        }
        let per_step = |c: usize| d.samples.iter().find(|s| s.label == c).unwrap().frames.clone();
        assert_ne!(per_step(0), per_step(1));
    }
}

#[test]
fn synthetic_generators_are_seeded_and_shaped() {
    for task in [SynthTask::MovingBar, SynthTask::RatePattern, SynthTask::TemporalOrder] {
        let spec = SynthSpec::new(task, 5, 2, 10, 3);
        let a = make_synthetic(&spec).unwrap();
        assert_eq!(a, make_synthetic(&spec).unwrap());
        assert_eq!(a.len(), 10);
        assert_eq!(a.sample_shape(), Some(&[5, 2, 16, 16][..]));
        assert!(a.samples.iter().all(|s| s.frames.data().iter().all(|&v| v >= 0.0)));
        let b = make_synthetic(&SynthSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a, b);
    }
}
