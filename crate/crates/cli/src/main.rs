use clap::Parser;

fn main() {
    let cli = roofline_cli::Cli::parse();
    let mut out = std::io::stdout().lock();
    let code = match roofline_cli::dispatch(&cli, &mut out) {
        Ok(errors) if errors.is_empty() => 0,
        Ok(errors) => {
            for e in &errors {
                eprintln!("error: {e}");
            }
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    };
    std::process::exit(code);
}
