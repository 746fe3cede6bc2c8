from fanfill.cli import main

main()
