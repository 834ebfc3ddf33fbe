from fewgan.cli import main

main()
