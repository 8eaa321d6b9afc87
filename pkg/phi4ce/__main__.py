from phi4ce.cli import main

raise SystemExit(main())
