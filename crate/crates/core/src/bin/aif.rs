use clap::Parser;

fn main() -> anyhow::Result<()> {
    let cli = aif::commands::Cli::parse();
    let code = aif::commands::execute(cli, &mut std::io::stdout())?;
    std::process::exit(code);
}
