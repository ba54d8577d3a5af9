//! The command-line pipeline driven in-process on a scratch directory.

fn main() {
    let dir = tempfile::tempdir().expect("scratch directory");
    let workdir = dir.path().to_str().expect("utf-8 path").to_string();
    let steps: [&[&str]; 6] = [
        &["gen-data"],
        &["train-source"],
        &["anchors"],
        &["run", "--out", "run"],
        &["report", "run"],
        &["sweep", "--param", "lambda", "--values", "0,1"],
    ];
    for args in steps {
        let mut argv = vec!["ttac".to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        if args[0] == "report" {
            argv[2] = format!("{workdir}/run");
        } else {
            argv.extend(["--workdir".to_string(), workdir.clone()]);
        }
        println!("$ {}", argv.join(" "));
        let code = ttac::cli::cli_main(argv);
        assert_eq!(code, 0, "{args:?} failed");
    }
    let index = std::fs::read_to_string(dir.path().join("sweep/index.json")).expect("sweep index");
    println!("{index}");
}
