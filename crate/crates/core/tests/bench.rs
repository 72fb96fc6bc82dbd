use lawcat::bench::*;

fn synthetic(imp: Impl, lens: &[usize], f: impl Fn(f64) -> f64) -> Vec<BenchRow> {
    lens.iter()
        .map(|&n| BenchRow {
            imp,
            seq_len: n,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            reps: 5,
            wall_ns_p10: f(n as f64) as u64,
            wall_ns_median: f(n as f64) as u64,
            wall_ns_p90: f(n as f64) as u64,
            peak_state_bytes: 0,
            failed: None,
        })
        .collect()
}

#[test]
fn smoke_all_impls() {
    let rows = bench_prefill(&BenchConfig::default(), &[256], 5).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!(r.failed.is_none());
        assert!(r.wall_ns_p10 > 0 && r.wall_ns_p10 <= r.wall_ns_median && r.wall_ns_median <= r.wall_ns_p90);
    }
}

#[test]
fn too_few_reps_is_config_error() {
    assert!(matches!(
        bench_prefill(&BenchConfig::default(), &[16], 4),
        Err(lawcat::Error::Config(_))
    ));
}

#[test]
fn exact_power_laws_are_recovered() {
    let lens = [1000, 2000, 4000, 8000, 16000];
    let a = fit_scaling_exponent(&synthetic(Impl::LawcatRecurrent, &lens, |n| 3.0 * n)).unwrap();
    let b = fit_scaling_exponent(&synthetic(Impl::Softmax, &lens, |n| 0.5 * n * n)).unwrap();
    assert!((a - 1.0).abs() < 1e-9, "{a}");
    assert!((b - 2.0).abs() < 1e-9, "{b}");
}

#[test]
fn fit_rejects_short_or_mixed_inputs() {
    let three = synthetic(Impl::Swa, &[1000, 4000, 16000], |n| n);
    assert!(matches!(fit_scaling_exponent(&three), Err(lawcat::Error::Fit(_))));
    let narrow = synthetic(Impl::Swa, &[1000, 1500, 2000, 4000], |n| n);
    assert!(matches!(fit_scaling_exponent(&narrow), Err(lawcat::Error::Fit(_))));
    let mut mixed = synthetic(Impl::Swa, &[1000, 2000, 4000, 8000], |n| n);
    mixed[0].imp = Impl::Softmax;
    assert!(matches!(fit_scaling_exponent(&mixed), Err(lawcat::Error::Fit(_))));
}

#[test]
fn state_bytes_constant_for_lawcat_only() {
    let rows = bench_prefill(&BenchConfig::default(), &[64, 128, 256], 5).unwrap();
    let bytes = |imp| rows.iter().filter(|r| r.imp == imp).map(|r| r.peak_state_bytes).collect::<Vec<_>>();
    for imp in [Impl::LawcatRecurrent, Impl::LawcatChunked] {
        let b = bytes(imp);
        assert!(b.iter().all(|&x| x == b[0] && x > 0));
    }
    let s = bytes(Impl::Softmax);
    assert!(s[1] >= 2 * s[0] && s[2] >= 2 * s[1]);
}

#[test]
fn over_budget_rows_fail_with_reason() {
    let cfg = BenchConfig {
        memory_budget_bytes: 1 << 20,
        ..BenchConfig::default()
    };
    let rows = bench_prefill(&cfg, &[32, 2048], 5).unwrap();
    assert!(rows.iter().filter(|r| r.seq_len == 32).all(|r| r.failed.is_none()));
    let failed: Vec<_> = rows.iter().filter(|r| r.seq_len == 2048).collect();
    assert_eq!(failed.len(), 4);
    assert!(failed.iter().all(|r| r.failed.as_deref().unwrap().contains("memory budget")));
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "impl,seq_len,d_model,n_heads,n_layers,reps,wall_ns_p10,wall_ns_median,wall_ns_p90,peak_state_bytes"
    );
    let last = text.lines().last().unwrap();
    assert!(last.starts_with("lawcat_chunked,2048,16,2,1,5,,,,"), "{last}");
}

#[test]
fn crossover_on_synthetic_rows() {
    let lens = [1000, 2000, 4000, 8000];
    let mut rows = synthetic(Impl::Softmax, &lens, |n| n * n / 1000.0);
    rows.extend(synthetic(Impl::LawcatRecurrent, &lens, |n| 3.0 * n));
    assert_eq!(crossover_length(&rows, Impl::LawcatRecurrent, Impl::Softmax), Some(4000));
    assert_eq!(crossover_length(&rows, Impl::Softmax, Impl::LawcatRecurrent), None);
}

#[test]
fn gnuplot_blocks_per_impl() {
    let mut rows = synthetic(Impl::Softmax, &[10, 20], |n| n);
    rows.extend(synthetic(Impl::LawcatChunked, &[10, 20], |n| n));
    let mut buf = Vec::new();
    write_gnuplot(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.matches("\n\n\n").count(), 1);
    assert!(text.contains("# softmax") && text.contains("# lawcat_chunked"));
}
