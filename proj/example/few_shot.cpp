// Trains adapters on one synthetic dataset, then scores images of unseen
// categories zero-shot and with one normal prompt image.
//
//   adaptkit_example [output_dir]

#include <iostream>

#include "adaptkit/adaptkit.hpp"

using namespace adaptkit;

int main(int argc, char** argv) {
    const std::filesystem::path out = argc > 1 ? argv[1] : "adaptkit_example_out";

    data::SyntheticConfig base;
    base.resolution = 112;
    base.n_train_good = 0;
    base.n_normal = 12;
    base.n_anomalous = 12;
    data::SyntheticConfig target = base;
    target.categories = {"mesh"};
    target.seed = 5;
    const auto train = data::generate_synthetic(base, out / "base");
    const auto test = data::generate_synthetic(target, out / "target");

    EncoderConfig enc;
    enc.input_resolution = 112;
    enc.patch_size = 14;
    enc.embed_dim = 32;
    enc.text_width = 32;
    auto backbone = std::make_shared<SyntheticBackbone>(enc);

    TrainConfig cfg;
    cfg.epochs = 4;
    const FitResult fitted = fit(train, cfg, backbone, [](const EpochLog& e) { std::cout << "epoch " << e.epoch << "  loss " << e.total << '\n'; });
    save_checkpoint(out / "checkpoint.adck", fitted.checkpoint);

    const Predictor predictor(backbone, fitted.checkpoint);
    const auto prompt = data::sample_prompts(test, "mesh", 1, 0);
    const PromptBank bank = predictor.make_bank({data::read_image(prompt[0].image_path)}, "mesh");

    for (const auto& s : test) {
        if (s.image_path == prompt[0].image_path) continue;
        const Image img = data::read_image(s.image_path);
        const Prediction zero = predictor.predict_zero_shot(img);
        const Prediction one = predictor.predict_few_shot(img, bank);
        std::cout << s.image_path.filename().string() << "  label " << s.label << "  zero-shot " << zero.score << "  one-shot " << one.score << '\n';
    }
    const auto last = std::find_if(test.rbegin(), test.rend(), [](const data::Sample& s) { return s.label == 1; });
    const Image img = data::read_image(last->image_path);
    export_prediction(predictor.predict_few_shot(img, bank), img, out / "maps", "example");
    std::cout << "maps written to " << (out / "maps").string() << '\n';
}
