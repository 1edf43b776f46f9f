use clap::Parser;
use kpca_audit::report::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let code = run(&cli.command, &mut std::io::stdout().lock(), &mut std::io::stderr().lock());
    std::process::exit(code);
}
