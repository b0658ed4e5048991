use clap::Parser;

fn main() {
    let cli = match bestow_cli::Cli::try_parse() {
        Ok(c) => c,
        // help and version requests land here too
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ").to_string();
            let err = bestow_cli::error::usage(first);
            eprintln!("{}", err.line());
            std::process::exit(err.exit_code());
        }
    };
    match bestow_cli::run(cli) {
        Ok(o) => {
            for w in &o.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", o.summary);
            if !o.summary.ends_with('\n') {
                println!();
            }
        }
        Err(e) => {
            eprintln!("{}", e.line());
            std::process::exit(e.exit_code());
        }
    }
}
