from mergecl.cli import main

main()
