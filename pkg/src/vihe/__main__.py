from vihe.cli.main import cli


def main():
    cli(prog_name="vihe")


if __name__ == "__main__":
    main()
