// Drives the command-line front end in-process.

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let (mut out, mut err) = (std::io::stdout(), std::io::stderr());
    let mut run = |args: &[&str]| {
        let code = msla::cli::run(std::iter::once("msla").chain(args.iter().copied()), &mut out, &mut err);
        assert_eq!(code, 0, "{args:?}");
    };
    run(&["gen-data", "--out", data.to_str().unwrap(), "--count", "4", "--size", "64"]);
    run(&["count", "--preset", "small"]);
    run(&["gradcheck", "--module", "conv2d", "--seeds", "2"]);
}
