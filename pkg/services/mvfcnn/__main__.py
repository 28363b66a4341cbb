from services.mvfcnn.cli import main

main()
