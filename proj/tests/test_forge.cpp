#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "fvlm/errors.hpp"
#include "fvlm/forge.hpp"
#include "fvlm/tokenizer.hpp"

using namespace fvlm;
namespace fs = std::filesystem;

namespace {

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) lines.push_back(line);
    return lines;
}

const std::string kData = std::string(FVLM_SOURCE_DIR) + "/data/";

}  // namespace

TEST_CASE("bundled rules match the data files byte-exactly") {
    auto lines = read_lines(kData + "description_rules.txt");
    const auto& rules = description_rules();
    REQUIRE(rules.size() == 61);
    REQUIRE(lines.size() == 61);
    for (std::size_t i = 0; i < 61; ++i) CHECK(rules[i].line == lines[i]);

    auto extra = read_lines(kData + "extra_rules.txt");
    REQUIRE(extra_rules().size() == extra.size());
    for (std::size_t i = 0; i < extra.size(); ++i)
        CHECK(extra_rules()[i].line == extra[i]);
}

TEST_CASE("bundled instructions and prompt match the data files byte-exactly") {
    auto short_lines = read_lines(kData + "instructions_short.txt");
    auto long_lines = read_lines(kData + "instructions_long.txt");
    REQUIRE(short_instructions().size() == 10);
    REQUIRE(long_instructions().size() == 10);
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(short_instructions()[i] == short_lines[i]);
        CHECK(long_instructions()[i] == long_lines[i]);
    }
    auto prompt_lines = read_lines(kData + "dialogue_prompt.txt");
    REQUIRE(prompt_lines.size() == 1);
    CHECK(dialogue_prompt() == prompt_lines[0]);
}

TEST_CASE("every rule parses and maps to at least one sign") {
    for (const DescriptionRule& r : description_rules()) {
        CHECK(!r.disease.empty());
        CHECK(!r.clauses.empty());
        SignVector v = signs_for(r.disease);
        int total = 0;
        for (int s : v) total += s;
        CHECK(total >= 1);
    }
    // Two bundled lines share a disease name; lookup resolves to the first.
    const DescriptionRule* hr = find_rule("Hypertensive Retinopathy");
    REQUIRE(hr != nullptr);
    CHECK(hr->clauses.front() == "Abnormal arterial vein ratio");
}

TEST_CASE("build_description reproduces bundled lines") {
    CHECK(build_description({"Moderate Non-Proliferative Diabetic Retinopathy"},
                            true) ==
          "Abnormal, Moderate Non-Proliferative Diabetic Retinopathy, Retinal "
          "hemorrhages or hard exudates observed.");
    CHECK(build_description({}, false) ==
          "Normal, Healthy, Normal optic disk color and clear optic disk "
          "boundaries, Normal Macular color, Normal fundus color, No apparent "
          "retinopathy.");
    CHECK(build_description({"Healthy"}, false) == build_description({}, false));
    CHECK(build_description({"Severe Diabetic Macular Edema",
                             "Moderate Non-Proliferative Diabetic Retinopathy"},
                            true) ==
          "Abnormal, Severe Diabetic Macular Edema, lots of hard exudates near to "
          "macula center observed, Moderate Non-Proliferative Diabetic Retinopathy, "
          "Retinal hemorrhages or hard exudates observed.");
}

TEST_CASE("build_description rejects unknown and inconsistent input") {
    CHECK_THROWS_WITH_AS(build_description({"Haunted Retina"}, true),
                         doctest::Contains("Haunted Retina"), ContractError);
    CHECK_THROWS_AS(build_description({}, true), ContractError);
    CHECK_THROWS_AS(build_description({"Healthy", "Glaucoma"}, false), ContractError);
}

TEST_CASE("derive_signs unions the mapping table") {
    SignVector glaucoma = derive_signs({"Glaucoma"});
    CHECK(glaucoma == SignVector{0, 0, 0, 1, 0, 0});
    SignVector pdr = derive_signs({"Proliferative Diabetic Retinopathy"});
    CHECK(pdr == SignVector{0, 0, 0, 0, 1, 0});
    SignVector both = derive_signs({"Branch Retinal Vein Occlusion", "Macular Edema"});
    CHECK(both == SignVector{1, 1, 0, 0, 0, 0});
    SignVector healthy = derive_signs({});
    CHECK(healthy == SignVector{0, 0, 0, 0, 0, 1});
    CHECK_THROWS_AS(derive_signs({"Unknown Disease"}), ContractError);
}

TEST_CASE("select_instruction splits on answer length and is seeded") {
    std::string five = "one two three four five";
    std::ostringstream many;
    for (int i = 0; i < 80; ++i) many << "word ";
    const std::string& s = select_instruction(five, 7);
    const auto& shorts = short_instructions();
    CHECK(std::find(shorts.begin(), shorts.end(), s) != shorts.end());
    const std::string& l = select_instruction(many.str(), 7);
    const auto& longs = long_instructions();
    CHECK(std::find(longs.begin(), longs.end(), l) != longs.end());
    CHECK(select_instruction(five, 123) == select_instruction(five, 123));

    // 29 words stays short; 30 flips long.
    std::ostringstream w29, w30;
    for (int i = 0; i < 29; ++i) w29 << "w ";
    for (int i = 0; i < 30; ++i) w30 << "w ";
    const std::string& a = select_instruction(w29.str(), 5);
    const std::string& b = select_instruction(w30.str(), 5);
    CHECK(std::find(shorts.begin(), shorts.end(), a) != shorts.end());
    CHECK(std::find(longs.begin(), longs.end(), b) != longs.end());
    CHECK_THROWS_AS(select_instruction("", 1), ContractError);
}

TEST_CASE("render_dialogue_prompt substitutes the keyword verbatim once") {
    std::string keyword = "Abnormal, Glaucoma, Abnormal optic disk color.";
    std::string prompt = render_dialogue_prompt(keyword);
    std::size_t first = prompt.find(keyword);
    REQUIRE(first != std::string::npos);
    CHECK(prompt.find(keyword, first + 1) == std::string::npos);
    CHECK(prompt.find("[Keyword]") == std::string::npos);
}

TEST_CASE("template dialogue generator meets the round contract") {
    TemplateGenerator gen;
    std::string desc = build_description({"Glaucoma"}, true);
    auto rounds = build_dialogue(desc, gen);
    REQUIRE(rounds.size() == 3);
    for (const DialogueRound& r : rounds) {
        CHECK(!r.question.empty());
        CHECK(!r.answer.empty());
        std::istringstream in(r.answer);
        std::string w;
        std::size_t n = 0;
        while (in >> w) ++n;
        CHECK(n <= 200);
    }
    CHECK(rounds[0].answer.find("Glaucoma") != std::string::npos);
    CHECK(rounds[1].answer.find("unclear optic disk boundaries") != std::string::npos);

    auto healthy = build_dialogue(build_description({}, false), gen);
    CHECK(healthy[0].answer.find("Normal") != std::string::npos);
}

TEST_CASE("clean_caption removes listed words whole-word and is idempotent") {
    CHECK(clean_caption("red arrow indicates lesion") == "indicates lesion");
    CHECK(clean_caption("normal retina") == "normal retina");
    CHECK(clean_caption("outline of lesion") == "outline of lesion");
    CHECK(clean_caption("The WHITE star and Yellow LINE") == "The and");
    CHECK(clean_caption("gray-scale image") == "-scale image");
    std::string once = clean_caption("blue green violet optic disc");
    CHECK(clean_caption(once) == once);
    CHECK(once == "optic disc");
}

TEST_CASE("prepend_modality formats and rejects charts") {
    CHECK(prepend_modality("optic disc visible", Modality::Fundus) ==
          "This is a Fundus image. optic disc visible");
    CHECK(prepend_modality("", Modality::OCT) == "This is a OCT image. ");
    CHECK_THROWS_AS(prepend_modality("x", Modality::TableChart), ContractError);
}

TEST_CASE("filter_modality keeps confident non-chart pairs in order") {
    std::vector<PretrainPair> pairs(6);
    pairs[0] = {{}, "a", Modality::Fundus, 0.9};
    pairs[1] = {{}, "b", Modality::TableChart, 0.99};
    pairs[2] = {{}, "c", Modality::OCT, 0.4};
    pairs[3] = {{}, "d", Modality::CT, 0.5};
    pairs[4] = {{}, "e", Modality::XRay, 1.0};
    pairs[5] = {{}, "f", Modality::TableChart, 0.1};

    auto kept = filter_modality(pairs, 0.5);
    REQUIRE(kept.size() == 3);
    CHECK(kept[0].caption == "a");
    CHECK(kept[1].caption == "d");
    CHECK(kept[2].caption == "e");

    CHECK(filter_modality(pairs, 0.0).size() == 4);
    CHECK(filter_modality(pairs, 1.0).size() == 1);
    CHECK_THROWS_AS(filter_modality(pairs, 1.5), ContractError);
}

TEST_CASE("modality names round-trip") {
    for (int i = 0; i < 9; ++i) {
        Modality m = static_cast<Modality>(i);
        CHECK(parse_modality(modality_name(m)) == m);
    }
    CHECK(std::string(modality_name(Modality::XRay)) == "X-ray");
    CHECK_THROWS_AS(parse_modality("Hologram"), ContractError);
}

TEST_CASE("enhance_contrast identities and fixture") {
    Image img;
    img.width = 2;
    img.height = 1;
    img.pixels = {0.2, 0.4, 0.6, 0.8, 0.5, 0.1};

    Image same = enhance_contrast(img, 1.0);
    CHECK(same.pixels == img.pixels);

    Image gray = enhance_contrast(img, 0.0);
    const double g = 0.45355;
    for (double v : gray.pixels) CHECK(v == doctest::Approx(g).epsilon(1e-12));

    Image out = enhance_contrast(img, 1.3);
    const double expect[6] = {0.123935, 0.383935, 0.643935, 0.903935, 0.513935, 0.0};
    for (int i = 0; i < 6; ++i)
        CHECK(out.pixels[i] == doctest::Approx(expect[i]).epsilon(1e-12));

    CHECK_THROWS_AS(enhance_contrast(img, -0.1), ContractError);
}

TEST_CASE("rgb/hsv conversions") {
    Image px;
    px.width = 3;
    px.height = 1;
    px.pixels = {1, 0, 0, 0.5, 0.5, 0.5, 0.0, 0.75, 0.25};
    Image hsv = rgb_to_hsv(px);
    CHECK(hsv.pixels[0] == 0.0);  // red hue
    CHECK(hsv.pixels[1] == 1.0);
    CHECK(hsv.pixels[2] == 1.0);
    CHECK(hsv.pixels[3 + 1] == 0.0);  // gray has no saturation
    CHECK(hsv.pixels[3 + 2] == 0.5);

    Image back = hsv_to_rgb(hsv);
    for (std::size_t i = 0; i < px.pixels.size(); ++i)
        CHECK(std::abs(back.pixels[i] - px.pixels[i]) <= 1.0 / 255.0);
}

TEST_CASE("ppm round trip and corruption detection") {
    fs::path dir = fs::temp_directory_path() / "fvlm_ppm_test";
    fs::create_directories(dir);
    Image img = synthetic_image(16, 99);
    const std::string path = (dir / "t.ppm").string();
    write_ppm(img, path);
    Image rt = read_ppm(path);
    REQUIRE(rt.width == 16);
    REQUIRE(rt.height == 16);
    for (std::size_t i = 0; i < img.pixels.size(); ++i)
        CHECK(std::abs(rt.pixels[i] - img.pixels[i]) <= 0.5 / 255.0 + 1e-12);

    // Truncate the pixel payload.
    {
        std::ifstream in(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(in)), {});
        std::ofstream out(path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    CHECK_THROWS_AS(read_ppm(path), CorruptionError);
    fs::remove_all(dir);
}

TEST_CASE("forged corpus is clean and serializes losslessly") {
    TemplateGenerator gen;
    ForgeOptions opt;
    opt.count = 24;
    opt.seed = 11;
    opt.image_size = 16;
    opt.generator = &gen;
    auto records = forge_fundus_records(opt);
    REQUIRE(records.size() == 24);
    CHECK(validate_corpus(records).empty());

    std::size_t rounds = 0;
    for (const auto& r : records) rounds += r.dialogue.size();
    CHECK(rounds == 3 * records.size());

    fs::path dir = fs::temp_directory_path() / "fvlm_corpus_test";
    fs::create_directories(dir);
    const std::string path = (dir / "corpus.jsonl").string();
    write_fundus_corpus(records, path);
    auto loaded = read_fundus_corpus(path);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        CHECK(loaded[i].description == records[i].description);
        CHECK(loaded[i].diseases == records[i].diseases);
        CHECK(loaded[i].signs == records[i].signs);
        CHECK(loaded[i].dialogue.size() == 3);
        CHECK(loaded[i].dialogue[1].answer == records[i].dialogue[1].answer);
    }
    CHECK(validate_corpus(loaded).empty());

    // Same seed forges the same corpus.
    auto again = forge_fundus_records(opt);
    write_fundus_corpus(again, (dir / "corpus2.jsonl").string());
    std::ifstream a(path, std::ios::binary), b((dir / "corpus2.jsonl").string(),
                                               std::ios::binary);
    std::string sa((std::istreambuf_iterator<char>(a)), {});
    std::string sb((std::istreambuf_iterator<char>(b)), {});
    CHECK(sa == sb);
    fs::remove_all(dir);
}

TEST_CASE("validate_corpus flags broken records") {
    TemplateGenerator gen;
    ForgeOptions opt;
    opt.count = 4;
    opt.seed = 3;
    opt.image_size = 16;
    opt.generator = &gen;
    auto records = forge_fundus_records(opt);
    records[1].dialogue.pop_back();
    records[2].signs = {0, 0, 0, 0, 0, 0};
    records[3].description = "Something else entirely";
    auto issues = validate_corpus(records);
    std::set<std::size_t> flagged;
    for (const auto& is : issues) flagged.insert(is.record);
    CHECK(flagged == std::set<std::size_t>{1, 2, 3});
}

TEST_CASE("pretrain pairs forge, filter, and round-trip") {
    auto pairs = forge_pretrain_pairs(40, 5, 16);
    REQUIRE(pairs.size() == 40);
    bool has_chart = false;
    for (const auto& p : pairs) has_chart = has_chart || p.modality == Modality::TableChart;
    CHECK(has_chart);

    auto kept = filter_modality(pairs, 0.5);
    for (const auto& p : kept) {
        CHECK(p.modality != Modality::TableChart);
        CHECK(p.confidence >= 0.5);
    }

    fs::path dir = fs::temp_directory_path() / "fvlm_pretrain_test";
    fs::create_directories(dir);
    const std::string path = (dir / "pairs.jsonl").string();
    write_pretrain_corpus(pairs, path);
    auto loaded = read_pretrain_corpus(path);
    REQUIRE(loaded.size() == pairs.size());
    CHECK(loaded[7].caption == pairs[7].caption);
    CHECK(loaded[7].modality == pairs[7].modality);
    fs::remove_all(dir);
}

TEST_CASE("byte tokenizer round-trips and builds masked dialogue streams") {
    std::string text = "Fundus: 87% clarity\n";
    auto toks = encode_bytes(text);
    CHECK(toks.size() == text.size());
    CHECK(decode_bytes(toks) == text);

    std::vector<DialogueRound> rounds = {{"Q1", "A1!"}, {"Qq2", "Aa2"}, {"3", "z"}};
    TokenStream s = encode_dialogue(rounds);
    // BOS + (2+3+1) + (3+3+1) + (1+1+1)
    REQUIRE(s.tokens.size() == 1 + 6 + 7 + 3);
    CHECK(s.tokens[0] == kBos);
    CHECK(s.is_target[0] == 0);
    CHECK(s.tokens[3] == static_cast<int>('A'));
    CHECK(s.is_target[3] == 1);
    CHECK(s.tokens[6] == kEos);
    CHECK(s.is_target[6] == 1);
    std::size_t targets = 0;
    for (auto m : s.is_target) targets += m;
    CHECK(targets == 3 + 1 + 3 + 1 + 1 + 1);

    CHECK(decode_bytes({kBos, 'h', 'i', kEos, 'x'}) == "hi");
    CHECK_THROWS_AS(encode_dialogue({}), ContractError);
    CHECK_THROWS_AS(encode_dialogue({{"q", ""}}), ContractError);
}
