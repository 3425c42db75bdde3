use std::io::Write;

fn main() {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .format(|buf, record| {
            writeln!(buf, "level={} {}", record.level().as_str().to_lowercase(), record.args())
        })
        .init();
    std::process::exit(pqrec::cli::run(std::env::args_os()));
}
