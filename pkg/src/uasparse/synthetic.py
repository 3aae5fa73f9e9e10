"""Seeded generator of labelled synthetic UA strings.

Records carry the same JSON keys the ingest step reads (``ua``,
``os_name``, ``os_version``, ``software_name``, ``software_version``) plus
a ``source_cidr``. Templates follow the shapes of common mobile/desktop
browsers and in-app webviews, including URL-encoded and underscore-joined
versions so the character edits matter.
"""

from __future__ import annotations

import json
import random

OS_CLASSES = ("Android", "iOS", "iPad", "Linux", "Macintosh", "Windows", "N/A")
SOFTWARE_CLASSES = ("Android WebView", "Chrome", "Facebook App", "Instagram",
                    "Internet Explorer", "Opera", "N/A")

COMPATIBLE = {
    "Android": ("Chrome", "Android WebView", "Facebook App", "Instagram", "Opera", "N/A"),
    "iOS": ("Chrome", "Facebook App", "Instagram", "N/A"),
    "iPad": ("Chrome", "Facebook App", "Instagram", "N/A"),
    "Linux": ("Chrome", "Opera", "N/A"),
    "Macintosh": ("Chrome", "Opera", "N/A"),
    "Windows": ("Chrome", "Internet Explorer", "Opera", "N/A"),
    "N/A": ("Chrome", "N/A"),
}

CIDRS = ("1.123.45.0/24", "101.127.8.0/24", "23.88.190.0/24", "203.0.113.0/24")

ANDROID_DEVICES = ("SM-G986B", "SM-G988B", "SM-N960F", "SM-A515F", "Pixel 6", "Pixel 7 Pro",
                   "M2101K6G", "CPH2211", "moto g(30)", "Redmi Note 9 Pro", "SM-T870", "LM-Q720")
ANDROID_BUILDS = ("PPR1.180610.011", "SP1A.210812.016", "RP1A.200720.012", "TP1A.220624.014",
                  "QP1A.190711.020")
CHROME_VERSIONS = ("105.0.0.0", "105.0.5195.136", "104.0.5112.97", "103.0.5060.129",
                   "106.0.5249.79", "99.0.4844.88", "108.0.5359.128")
FB_VERSIONS = ("379.1.0.23.114", "386.0.0.35.108", "388.0.0.32.105", "370.0.0.24.109")
IG_VERSIONS = ("253.0.0.23.114", "250.0.0.21.109", "256.0.0.18.105", "245.0.0.18.108")
OPERA_VERSIONS = ("91.0.4516.65", "90.0.4480.84", "72.2.3767.68861", "92.0.4561.33")
FIREFOX_VERSIONS = ("105.0", "106.0", "102.0", "91.0")
SAFARI_VERSIONS = ("16.0", "15.6.1", "16.1", "15.4")
EDGE_VERSIONS = ("105.0.1343.53", "106.0.1370.34", "104.0.1293.70")
SAMSUNG_VERSIONS = ("18.0", "17.0", "19.0")
IE_VERSIONS = ("11.0", "10.0", "9.0", "8.0")


def _os_part(os_name, rng, webview=False):
    """Return (platform section text, os_version label or None)."""
    if os_name == "Android":
        v = rng.choice(("9", "10", "11", "12", "13"))
        device = rng.choice(ANDROID_DEVICES)
        if webview:
            return f"Linux; Android {v}; {device} Build/{rng.choice(ANDROID_BUILDS)}; wv", v
        if rng.random() < 0.3:
            return f"Linux; U; Android {v}; en-us; {device}", v
        return f"Linux; Android {v}; {device}", v
    if os_name == "iOS":
        v = rng.choice(("16_1", "15_6_1", "16_0_2", "14_8", "15_7"))
        return f"iPhone; CPU iPhone OS {v} like Mac OS X", v
    if os_name == "iPad":
        v = rng.choice(("16_1", "15_6", "14_7_1", "16_0"))
        return f"iPad; CPU OS {v} like Mac OS X", v
    if os_name == "Linux":
        return rng.choice(("X11; Linux x86_64", "X11; Ubuntu; Linux x86_64",
                           "X11; Fedora; Linux x86_64", "X11; Linux i686")), None
    if os_name == "Macintosh":
        v = rng.choice(("10_15_7", "13_0", "12_6", "11_6_8", "10_14_6"))
        return f"Macintosh; Intel Mac OS X {v}", v
    if os_name == "Windows":
        v = rng.choice(("10.0", "6.1", "6.3", "6.2"))
        arch = rng.choice(("Win64; x64", "WOW64", ""))
        return (f"Windows NT {v}; {arch}" if arch else f"Windows NT {v}"), v
    choice = rng.choice(("cros", "bsd", "kai", "tizen"))
    if choice == "cros":
        v = rng.choice(("14989.107.0", "15054.98.0", "14816.131.0"))
        return f"X11; CrOS x86_64 {v}", v
    if choice == "bsd":
        return "X11; FreeBSD amd64", None
    if choice == "kai":
        v = rng.choice(("2.5", "3.0", "2.5.4"))
        return f"Mobile; LYF/F300B/LV-F300B-01-00; KAIOS {v}", v
    v = rng.choice(("5.0", "6.0", "4.0"))
    return f"Linux; Tizen {v}; SMART-TV", v


def _render(os_name, software, rng):
    """Return (ua, os_version, software_version)."""
    webview = software == "Android WebView" or (
        os_name == "Android" and software in ("Facebook App", "Instagram"))
    platform, os_version = _os_part(os_name, rng, webview=webview)
    apple_mobile = os_name in ("iOS", "iPad")
    mobile = " Mobile" if os_name in ("Android", "iOS") else ""
    chrome = rng.choice(CHROME_VERSIONS)

    if software == "Chrome":
        if apple_mobile:
            return (f"Mozilla/5.0 ({platform}) AppleWebKit/605.1.15 (KHTML, like Gecko) "
                    f"CriOS/{chrome} Mobile/15E148 Safari/604.1", os_version, chrome)
        return (f"Mozilla/5.0 ({platform}) AppleWebKit/537.36 (KHTML, like Gecko) "
                f"Chrome/{chrome}{mobile} Safari/537.36", os_version, chrome)
    if software == "Android WebView":
        return (f"Mozilla/5.0 ({platform}) AppleWebKit/537.36 (KHTML, like Gecko) "
                f"Version/4.0 Chrome/{chrome} Mobile Safari/537.36", os_version, chrome)
    if software == "Facebook App":
        v = rng.choice(FB_VERSIONS)
        if apple_mobile:
            dev = "iPhone13,2" if os_name == "iOS" else "iPad8,1"
            return (f"Mozilla/5.0 ({platform}) AppleWebKit/605.1.15 (KHTML, like Gecko) "
                    f"Mobile/15E148 [FBAN/FBIOS;FBDV/{dev};FBMD/iPhone;FBSN/iOS;"
                    f"FBAV/{v}; FBBV/422352245;FBLC/en_US;FBOP/5]", os_version, v)
        tag = rng.choice(("%5BFB_IAB/Orca-Android;FBAV/", "[FB_IAB/FB4A;FBAV/"))
        close = "%5D" if tag.startswith("%5B") else "]"
        return (f"Mozilla/5.0 ({platform}) AppleWebKit/537.36 (KHTML, like Gecko) "
                f"Version/4.0 Chrome/{chrome} Mobile Safari/537.36 {tag}{v};{close}",
                os_version, v)
    if software == "Instagram":
        v = rng.choice(IG_VERSIONS)
        if apple_mobile:
            dev = "iPhone13,2" if os_name == "iOS" else "iPad8,1"
            return (f"Mozilla/5.0 ({platform}) AppleWebKit/605.1.15 (KHTML, like Gecko) "
                    f"Mobile/15E148 Instagram {v} ({dev}; iOS {os_version}; en_US; en; "
                    f"scale=3.00; 1170x2532; 419743411)", os_version, v)
        return (f"Mozilla/5.0 ({platform}) AppleWebKit/537.36 (KHTML, like Gecko) "
                f"Version/4.0 Chrome/{chrome} Mobile Safari/537.36 Instagram {v} "
                f"Android (31/12; 450dpi; 1080x2400; samsung; SM-G986B; y2s; exynos990; "
                f"en_GB; 419743411)", os_version, v)
    if software == "Internet Explorer":
        v = rng.choice(IE_VERSIONS)
        if os_version == "10.0":
            v = "11.0"
        if v == "11.0":
            trident = rng.choice(("Trident/7.0", "Trident/7.0; NMTE", "Trident/7.0; Touch"))
            return f"Mozilla/5.0 ({platform}; {trident}; rv:11.0) like Gecko", os_version, v
        return (f"Mozilla/4.0 (compatible; MSIE {v}; {platform}; Trident/{int(float(v)) - 4}.0)",
                os_version, v)
    if software == "Opera":
        v = rng.choice(OPERA_VERSIONS)
        return (f"Mozilla/5.0 ({platform}) AppleWebKit/537.36 (KHTML, like Gecko) "
                f"Chrome/{chrome}{mobile} Safari/537.36 OPR/{v}", os_version, v)

    # software outside the six named classes
    if apple_mobile or (os_name == "Macintosh" and rng.random() < 0.6):
        v = rng.choice(SAFARI_VERSIONS)
        tail = " Mobile/15E148" if apple_mobile else ""
        return (f"Mozilla/5.0 ({platform}) AppleWebKit/605.1.15 (KHTML, like Gecko) "
                f"Version/{v}{tail} Safari/604.1", os_version, v)
    if os_name == "Windows" and rng.random() < 0.5:
        v = rng.choice(EDGE_VERSIONS)
        return (f"Mozilla/5.0 ({platform}) AppleWebKit/537.36 (KHTML, like Gecko) "
                f"Chrome/{chrome} Safari/537.36 Edg/{v}", os_version, v)
    if os_name == "Android" and rng.random() < 0.5:
        v = rng.choice(SAMSUNG_VERSIONS)
        return (f"Mozilla/5.0 ({platform}) AppleWebKit/537.36 (KHTML, like Gecko) "
                f"SamsungBrowser/{v} Chrome/{chrome} Mobile Safari/537.36", os_version, v)
    v = rng.choice(FIREFOX_VERSIONS)
    return (f"Mozilla/5.0 ({platform}; rv:{v}) Gecko/20100101 Firefox/{v}", os_version, v)


def make_record(os_name, software, rng):
    if software not in COMPATIBLE[os_name]:
        raise ValueError(f"{software!r} does not run on {os_name!r} in the generator")
    ua, os_version, sw_version = _render(os_name, software, rng)
    if rng.random() < 0.1:
        ua = ua.replace(" ", "%20", rng.randint(1, 3))
    rec = {"ua": ua, "os_name": os_name, "software_name": software,
           "source_cidr": rng.choice(CIDRS)}
    if os_version is not None:
        rec["os_version"] = os_version
    if sw_version is not None:
        rec["software_version"] = sw_version
    return rec


def generate(n_per_class, balance="software", seed=0):
    """Generate ``7 * n_per_class`` records, balanced on the software or OS name."""
    rng = random.Random(seed)
    records = []
    if balance == "software":
        for software in SOFTWARE_CLASSES:
            hosts = [o for o in OS_CLASSES if software in COMPATIBLE[o]]
            for _ in range(n_per_class):
                records.append(make_record(rng.choice(hosts), software, rng))
    elif balance == "os":
        for os_name in OS_CLASSES:
            for _ in range(n_per_class):
                records.append(make_record(os_name, rng.choice(COMPATIBLE[os_name]), rng))
    else:
        raise ValueError(f"balance must be 'software' or 'os', got {balance!r}")
    rng.shuffle(records)
    return records


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
