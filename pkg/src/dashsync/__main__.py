from dashsync.cli import main

raise SystemExit(main())
