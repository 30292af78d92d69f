#include "nsgp/kernel_json.hpp"

#include "nsgp/errors.hpp"

namespace nsgp {

using nlohmann::json;

namespace {

json fixed_to_json(const KernelSpec& k) {
    json out = json::array();
    if (k.fixed() & kFixVariance) out.push_back("variance");
    if (k.fixed() & kFixLengthscale) out.push_back("lengthscale");
    if (k.fixed() & kFixPeriod) out.push_back("period");
    return out;
}

[[noreturn]] void fail(const std::string& path, const std::string& what) { throw ConfigError(path + ": " + what); }

const json& member(const json& j, const char* key, const std::string& path) {
    if (!j.contains(key)) fail(path, std::string("missing \"") + key + "\"");
    return j.at(key);
}

double number(const json& j, const char* key, const std::string& path) {
    const json& v = member(j, key, path);
    if (!v.is_number()) fail(path + "." + key, "expected a number");
    return v.get<double>();
}

std::vector<int> dims_of(const json& j, const std::string& path) {
    const json& v = member(j, "active_dims", path);
    if (!v.is_array()) fail(path + ".active_dims", "expected an array of column indices");
    std::vector<int> out;
    for (const json& d : v) {
        if (!d.is_number_integer()) fail(path + ".active_dims", "expected integers");
        out.push_back(d.get<int>());
    }
    return out;
}

unsigned fixed_of(const json& j, const std::string& path) {
    if (!j.contains("fixed")) return 0;
    unsigned mask = 0;
    for (const json& f : j.at("fixed")) {
        const std::string name = f.is_string() ? f.get<std::string>() : "";
        if (name == "variance") mask |= kFixVariance;
        else if (name == "lengthscale" || name == "lengthscales") mask |= kFixLengthscale;
        else if (name == "period") mask |= kFixPeriod;
        else fail(path + ".fixed", "unknown parameter group \"" + f.dump() + "\"");
    }
    return mask;
}

}  // namespace

json kernel_to_json(const KernelSpec& k) {
    json out;
    if (const auto* n = std::get_if<SeArd>(&k.node())) {
        out = {{"type", "se_ard"}, {"variance", n->variance}, {"lengthscales", n->lengthscales},
               {"active_dims", k.active_dims()}};
    } else if (const auto* n = std::get_if<Periodic>(&k.node())) {
        out = {{"type", "periodic"}, {"variance", n->variance}, {"lengthscale", n->lengthscale},
               {"period", n->period}, {"active_dims", k.active_dims()}};
    } else if (const auto* n = std::get_if<Constant>(&k.node())) {
        out = {{"type", "constant"}, {"variance", n->variance}};
    } else if (const auto* n = std::get_if<Fgk>(&k.node())) {
        out = {{"type", "fgk"}, {"field", n->field}, {"active_dims", k.active_dims()}};
    } else if (const auto* n = std::get_if<Mgk>(&k.node())) {
        out = {{"type", "mgk"}, {"field", n->field}, {"active_dims", k.active_dims()}};
    } else if (const auto* n = std::get_if<Sum>(&k.node())) {
        out = {{"type", "sum"}, {"left", kernel_to_json(*n->left)}, {"right", kernel_to_json(*n->right)}};
    } else if (const auto* n = std::get_if<Product>(&k.node())) {
        out = {{"type", "product"}, {"left", kernel_to_json(*n->left)}, {"right", kernel_to_json(*n->right)}};
    }
    if (k.fixed() != 0) out["fixed"] = fixed_to_json(k);
    return out;
}

KernelSpec kernel_from_json(const json& j, const std::string& path) {
    if (!j.is_object()) fail(path, "expected an object");
    const json& type_field = member(j, "type", path);
    if (!type_field.is_string()) fail(path + ".type", "expected a string");
    const std::string type = type_field.get<std::string>();
    try {
        if (type == "se_ard") {
            const json& ls = member(j, "lengthscales", path);
            if (!ls.is_array()) fail(path + ".lengthscales", "expected an array");
            std::vector<double> values;
            for (const json& l : ls) {
                if (!l.is_number()) fail(path + ".lengthscales", "expected numbers");
                values.push_back(l.get<double>());
            }
            return KernelSpec::se_ard(number(j, "variance", path), std::move(values), dims_of(j, path))
                .with_fixed(fixed_of(j, path));
        }
        if (type == "periodic") {
            const std::vector<int> dims = dims_of(j, path);
            if (dims.size() != 1) fail(path + ".active_dims", "periodic acts on exactly one dimension");
            return KernelSpec::periodic(number(j, "variance", path), number(j, "lengthscale", path),
                                        number(j, "period", path), dims.front())
                .with_fixed(fixed_of(j, path));
        }
        if (type == "constant") {
            return KernelSpec::constant(number(j, "variance", path)).with_fixed(fixed_of(j, path));
        }
        if (type == "fgk" || type == "mgk") {
            const json& f = member(j, "field", path);
            if (!f.is_number_unsigned()) fail(path + ".field", "expected a non-negative integer");
            const auto field = f.get<std::size_t>();
            return type == "fgk" ? KernelSpec::fgk(field, dims_of(j, path))
                                 : KernelSpec::mgk(field, dims_of(j, path));
        }
        if (type == "sum" || type == "product") {
            KernelSpec left = kernel_from_json(member(j, "left", path), path + ".left");
            KernelSpec right = kernel_from_json(member(j, "right", path), path + ".right");
            return type == "sum" ? KernelSpec::sum(std::move(left), std::move(right))
                                 : KernelSpec::product(std::move(left), std::move(right));
        }
    } catch (const ConfigError&) {
        throw;
    } catch (const Error& e) {
        fail(path, e.what());
    }
    fail(path + ".type", "unknown kernel type \"" + type + "\"");
}

}  // namespace nsgp
